#![no_main]

use libfuzzer_sys::fuzz_target;
use p2d_runner::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::from_bytes(data) {
        let again = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).expect("re-encoded checkpoints load");
        assert_eq!(again.hash(), ckpt.hash());
        assert_eq!(again.model.params, ckpt.model.params);
    }
});
