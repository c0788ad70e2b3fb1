#![no_main]

use libfuzzer_sys::fuzz_target;
use meanflow::config::{apply_override, ExperimentConfig};

fuzz_target!(|data: &[u8]| {
    let Ok(spec) = std::str::from_utf8(data) else { return };
    let base = ExperimentConfig::default().to_toml();
    let mut tree: toml::Table = base.parse().expect("default config parses");
    let _ = apply_override(&mut tree, spec);
    let _ = ExperimentConfig::from_toml_with_overrides(&base, &[spec.to_string()]);
});
