#![no_main]

use libfuzzer_sys::fuzz_target;
use protoego::ingest::decode_rgb_png;

fuzz_target!(|data: &[u8]| {
    if let Ok(rgb) = decode_rgb_png(data) {
        assert_eq!(rgb.dim().2, 3);
        assert!(rgb.iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
