#![no_main]

use libfuzzer_sys::fuzz_target;
use protoego::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::from_toml_str(text, &[]) {
        // Anything accepted must survive a round trip.
        let back = RunConfig::from_toml_str(&cfg.to_toml_string(), &[]).expect("resolved config reparses");
        assert_eq!(back.to_toml_string(), cfg.to_toml_string());
    }
});
