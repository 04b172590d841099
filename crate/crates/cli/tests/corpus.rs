use std::fs;
use std::path::PathBuf;

use cola::clustering::TargetTable;
use cola::generation::LatentTable;
use cola::posterior::ClusterPosterior;
use cola_cli::artifacts::Stamped;
use cola_cli::config::RunConfig;

fn seed(target: &str, file: &str) -> Vec<u8> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target).join(file);
    fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn config_seeds_parse_validate_and_roundtrip() {
    for file in ["default.toml", "minimal.toml", "tiny.toml"] {
        let text = String::from_utf8(seed("run_config", file)).unwrap();
        let cfg = RunConfig::parse(&text).unwrap_or_else(|e| panic!("{file}: {e}"));
        cfg.validate().unwrap_or_else(|e| panic!("{file}: {e}"));
        let back = RunConfig::parse(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back.full_hash(), cfg.full_hash(), "{file}");
    }
}

#[test]
fn artifact_seeds_deserialize() {
    let t: Stamped<TargetTable> = serde_json::from_slice(&seed("artifact_json", "targets.json")).unwrap();
    assert!(!t.config_hash.is_empty());
    let l: Stamped<LatentTable> = serde_json::from_slice(&seed("artifact_json", "latents.json")).unwrap();
    assert_eq!(l.value.codes().len(), l.value.len() * l.value.code_dim());
    let p: Stamped<ClusterPosterior> = serde_json::from_slice(&seed("artifact_json", "posterior.json")).unwrap();
    p.value.validate().unwrap();
}

#[test]
fn corrupted_artifacts_are_rejected() {
    let raw = String::from_utf8(seed("artifact_json", "posterior.json")).unwrap();
    let broken = raw.replacen("\"value\"", "\"valu\"", 1);
    assert!(serde_json::from_str::<Stamped<ClusterPosterior>>(&broken).is_err());
    assert!(serde_json::from_str::<Stamped<LatentTable>>(&raw).is_err());
}
