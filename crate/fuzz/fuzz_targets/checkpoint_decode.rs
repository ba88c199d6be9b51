#![no_main]

use libfuzzer_sys::fuzz_target;
use protoego::checkpoint::Archive;

fuzz_target!(|data: &[u8]| {
    if let Ok(archive) = Archive::decode(data) {
        assert_eq!(archive.encode(), data);
    }
});
