#![no_main]

use cola_cli::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = RunConfig::parse(text) else { return };
    let _ = cfg.validate();
    let _ = cfg.step2_hash();
    if let Ok(again) = toml::to_string(&cfg) {
        let back = RunConfig::parse(&again).expect("serialized config must parse");
        assert_eq!(back.step2_hash(), cfg.step2_hash());
    }
});
