#![no_main]

use libfuzzer_sys::fuzz_target;
use meanflow::net::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::from_slice(data, "fuzz") {
        let again = Checkpoint::from_slice(&ckpt.to_bytes(), "fuzz").expect("re-decode");
        assert_eq!(ckpt.iteration, again.iteration);
    }
});
