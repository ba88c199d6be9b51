#![no_main]

use libfuzzer_sys::fuzz_target;
use protoego::ingest::decode_depth_png;

fuzz_target!(|data: &[u8]| {
    if let Ok((depth, valid)) = decode_depth_png(data) {
        assert_eq!(depth.dim(), valid.dim());
        assert!(depth.iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
