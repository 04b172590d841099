#![no_main]

use cola::nn::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::decode(data) {
        let bytes = ckpt.encode().expect("decoded checkpoint must re-encode");
        assert_eq!(Checkpoint::decode(&bytes).expect("re-encoded checkpoint must decode"), ckpt);
    }
});
