#![no_main]

use libfuzzer_sys::fuzz_target;
use meanflow::sample_eval::SampleDump;

fuzz_target!(|data: &[u8]| {
    if let Ok(dump) = SampleDump::from_bytes(data, "fuzz") {
        assert_eq!(dump.to_bytes(), data);
    }
});
