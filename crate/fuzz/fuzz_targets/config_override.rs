#![no_main]

use libfuzzer_sys::fuzz_target;
use protoego::config::RunConfig;

// One `key=value` override per line, applied to an empty document.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let overrides: Vec<String> = text.lines().map(str::to_string).collect();
    let _ = RunConfig::from_toml_str("", &overrides);
});
