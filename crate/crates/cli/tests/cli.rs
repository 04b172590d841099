use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cola::data::load_dataset;
use cola::nn::{Checkpoint, Encoder, Module};
use tempfile::TempDir;

const TINY: &str = r#"
name = "tiny"
dataset = "toy:2x6@8"
seeds = [0, 1, 2]
spc = 4

[step1]
encoder = { kind = "mlp", hidden = 16 }

[step1.clustering]
augmented_copies = 1
augmentation = { crop_pad = 1, horizontal_flip = true }
optim = { kind = "sgd-momentum", lr_params = 0.05, decay_factor = 0.5, decay_interval = 2, momentum = 0.9, batch_size = 4, epochs = 2 }

[step2]
noise_dim = 4
generator = { kind = "mlp", hidden = [16, 32] }
optim = { kind = "adaptive-moment", lr_params = 0.001, lr_latent = 0.01, decay_factor = 0.5, decay_interval = 2, momentum = 0.9, batch_size = 4, epochs = 4 }

[classifier]
arch = { kind = "mlp", hidden = 16 }
augmentation = { crop_pad = 1, horizontal_flip = false }
optim = { kind = "sgd-momentum", lr_params = 0.02, decay_factor = 0.5, decay_interval = 2, momentum = 0.9, batch_size = 4, epochs = 2 }

[eval]
features = "pca"
pca_components = 4

[theory.prop1]
ms = [5, 20]
deltas = [0.0, 0.05]
var_x = 1.0
var_zs = [1.0]
trials = 2000
"#;

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let s = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(s.config(), TINY).unwrap();
        s
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("run.toml")
    }

    fn runs(&self) -> PathBuf {
        self.dir.path().join("runs")
    }

    fn run_dir(&self) -> PathBuf {
        self.runs().join("tiny")
    }

    fn cola(&self, args: &[&str]) -> Output {
        let config = self.config();
        Command::new(env!("CARGO_BIN_EXE_cola"))
            .args(args)
            .arg("--config")
            .arg(&config)
            .env("COLA_RUNS_DIR", self.runs())
            .env("RUST_LOG", "warn")
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.cola(args);
        assert!(
            out.status.success(),
            "cola {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

fn csv_rows(path: impl AsRef<Path>) -> Vec<String> {
    String::from_utf8(read(path)).unwrap().lines().skip(1).map(str::to_string).collect()
}

#[test]
fn cluster_artifacts_reload_and_repeat() {
    let sb = Sandbox::new();
    let stdout = sb.ok(&["cluster"]);
    assert!(stdout.contains("purity"), "{stdout}");
    let step1 = sb.run_dir().join("step1");
    let raw = read(step1.join("encoder.ckpt"));
    let ckpt = Checkpoint::decode(&raw).unwrap();
    let enc = Encoder::from_checkpoint(&ckpt, candle_core::DType::F32).unwrap();
    let again = enc.to_checkpoint(ckpt.meta.epoch, ckpt.meta.seed, &ckpt.meta.config_hash).unwrap();
    assert_eq!(again.encode().unwrap(), raw);
    assert_eq!(csv_rows(step1.join("log.csv")).len(), 2);

    let targets = read(step1.join("targets.json"));
    sb.ok(&["cluster"]);
    assert_eq!(read(step1.join("targets.json")), targets);
    assert_eq!(read(step1.join("encoder.ckpt")), raw);
    assert!(step1.join("manifest.json").exists());
}

#[test]
fn supervised_mode_skips_step_one() {
    let sb = Sandbox::new();
    let out = sb.cola(&["cluster", "--mode", "scola"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Step I skipped in supervised mode"));
}

#[test]
fn config_errors_exit_with_two() {
    let sb = Sandbox::new();
    let out = sb.cola(&["gen", "--tau=-1"]);
    assert_eq!(out.status.code(), Some(2));
    fs::write(sb.config(), format!("{TINY}\nbogus = 1\n")).unwrap();
    let out = sb.cola(&["gen"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn gen_logs_every_epoch_and_resumes() {
    let sb = Sandbox::new();
    sb.ok(&["gen", "--mode", "scola", "--until", "2"]);
    let loss = sb.run_dir().join("step2/loss.csv");
    assert_eq!(csv_rows(&loss).len(), 2);
    sb.ok(&["gen", "--mode", "scola", "--resume"]);
    let rows = csv_rows(&loss);
    assert_eq!(rows.len(), 4);
    let epochs: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(epochs, ["0", "1", "2", "3"]);

    let resumed = read(sb.run_dir().join("step2/generator.ckpt"));
    sb.ok(&["gen", "--mode", "scola"]);
    assert_eq!(csv_rows(&loss), rows);
    assert_eq!(read(sb.run_dir().join("step2/generator.ckpt")), resumed);
}

#[test]
fn glo_ablation_trains_from_random_codes() {
    let sb = Sandbox::new();
    sb.ok(&["gen", "--mode", "glo"]);
    assert_eq!(csv_rows(sb.run_dir().join("step2/loss.csv")).len(), 4);
    let latents: serde_json::Value = serde_json::from_slice(&read(sb.run_dir().join("step2/latents.json"))).unwrap();
    assert_eq!(latents["value"]["mode"], "random-sphere");
}

#[test]
fn downstream_refuses_foreign_artifacts() {
    let sb = Sandbox::new();
    let out = sb.cola(&["gen"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cola cluster"));

    sb.ok(&["cluster"]);
    let out = sb.cola(&["gen", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config hash"));
}

#[test]
fn samples_reload_and_are_deterministic_at_zero_temperature() {
    let sb = Sandbox::new();
    sb.ok(&["gen", "--mode", "scola"]);
    let a = sb.dir.path().join("a");
    let b = sb.dir.path().join("b");
    let n = ["sample", "--mode", "scola", "-n", "2", "--per-class", "--tau", "0", "--out"];
    sb.ok(&[&n[..], &[a.to_str().unwrap()]].concat());
    sb.ok(&[&n[..], &[b.to_str().unwrap()]].concat());
    assert!(sb.run_dir().join("posterior/posterior.json").exists());
    assert!(a.join("grid.png").exists());

    let set = load_dataset(&a).unwrap();
    assert_eq!(set.class_count(), 2);
    assert_eq!(set.len(), 2);
    assert_eq!(set.indices_by_class().unwrap(), vec![vec![0], vec![1]]);
    assert_eq!(set, load_dataset(&b).unwrap());

    let clash = sb.dir.path().join("clash");
    fs::create_dir(&clash).unwrap();
    fs::write(clash.join("keep.txt"), "x").unwrap();
    let out = sb.cola(&["sample", "--mode", "scola", "--out", clash.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(clash.join("keep.txt").exists());
}

#[test]
fn evaluation_reports_are_reproducible() {
    let sb = Sandbox::new();
    sb.ok(&["cluster"]);
    sb.ok(&["gen"]);
    let table = sb.ok(&["eval"]);
    assert!(table.contains("fid") && table.contains("cas"));
    let report = sb.run_dir().join("reports/eval.json");
    let first = read(&report);
    sb.ok(&["eval"]);
    assert_eq!(read(&report), first);
    let v: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert!(v["fid"].as_f64().unwrap() >= 0.0);
    let cas = v["cas"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&cas));

    let stdout = sb.ok(&["demo"]);
    assert!(stdout.contains("cas gap"));
    let demo: serde_json::Value = serde_json::from_slice(&read(sb.run_dir().join("reports/demo.json"))).unwrap();
    for key in ["fid_conc", "fid_sparse", "cas_conc", "cas_sparse"] {
        assert!(demo["report"][key].is_number(), "{key}");
    }
}

#[test]
fn classify_reports_three_regimes_over_three_seeds() {
    let sb = Sandbox::new();
    let stdout = sb.ok(&["classify", "--mode", "scola"]);
    assert!(stdout.contains("±"));
    let v: serde_json::Value = serde_json::from_slice(&read(sb.run_dir().join("reports/classify.json"))).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 9);
    let summary = v["summary"].as_array().unwrap();
    let names: Vec<&str> = summary.iter().map(|s| s["regime"].as_str().unwrap()).collect();
    assert_eq!(names, ["real-only", "synthetic-only", "mix"]);
    for s in summary {
        assert!(s["std"].as_f64().unwrap() >= 0.0);
    }
    let steps: Vec<u64> = rows.iter().map(|r| r["steps"].as_u64().unwrap()).collect();
    assert!(steps.iter().all(|&s| s == steps[0]));
}

#[test]
fn theory_prop2_default_grid_has_no_violations() {
    let sb = Sandbox::new();
    let stdout = sb.ok(&["theory", "--prop", "2"]);
    assert!(stdout.contains("1000 points, 0 violations"), "{stdout}");
    let reports = sb.run_dir().join("reports");
    assert_eq!(csv_rows(reports.join("theory-prop2.csv")).len(), 1000);
    let v: serde_json::Value = serde_json::from_slice(&read(reports.join("theory-prop2.json"))).unwrap();
    assert_eq!(v["violations"], 0);
}

#[test]
fn theory_prop1_writes_table_and_series() {
    let sb = Sandbox::new();
    sb.ok(&["theory", "--prop", "1", "--trials", "1000"]);
    let reports = sb.run_dir().join("reports");
    let first = read(reports.join("theory-prop1.csv"));
    assert_eq!(csv_rows(reports.join("theory-prop1.csv")).len(), 4);
    let series: serde_json::Value = serde_json::from_slice(&read(reports.join("theory-prop1-series.json"))).unwrap();
    assert_eq!(series.as_array().unwrap().len(), 2);
    sb.ok(&["theory", "--prop", "1", "--trials", "1000"]);
    assert_eq!(read(reports.join("theory-prop1.csv")), first);

    let out = sb.cola(&["theory", "--prop", "3"]);
    assert_eq!(out.status.code(), Some(2));
}
