#![no_main]

use cola::data::decode_image;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((shape, pixels)) = decode_image(data) {
        assert_eq!(pixels.len(), shape.numel());
        assert!(pixels.iter().all(|p| (0.0..=1.0).contains(p)));
    }
});
