#![no_main]

use cola::clustering::TargetTable;
use cola::generation::LatentTable;
use cola::posterior::ClusterPosterior;
use cola_cli::artifacts::Stamped;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = serde_json::from_slice::<Stamped<TargetTable>>(data);
    if let Ok(t) = serde_json::from_slice::<Stamped<LatentTable>>(data) {
        assert_eq!(t.value.codes().len(), t.value.len() * t.value.code_dim());
    }
    if let Ok(p) = serde_json::from_slice::<Stamped<ClusterPosterior>>(data) {
        let _ = p.value.validate();
    }
});
