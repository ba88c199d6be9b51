#![no_main]

use libfuzzer_sys::fuzz_target;
use protoego::ingest::parse_manifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = parse_manifest(text) {
            assert!(m.fps > 0.0 && m.fps.is_finite());
        }
    }
});
