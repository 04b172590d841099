#![no_main]

use cola::data::DatasetSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(DatasetSpec::Toy(spec)) = text.parse::<DatasetSpec>() {
        // Canonical form parses back to the same spec.
        let again: DatasetSpec = spec.to_string().parse().expect("display form must parse");
        assert_eq!(again, DatasetSpec::Toy(spec));
    }
});
