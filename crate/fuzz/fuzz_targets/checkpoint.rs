#![no_main]

use libfuzzer_sys::fuzz_target;
use undercali::diffkit::parse_checkpoint;

fuzz_target!(|data: &[u8]| {
    let _ = parse_checkpoint(data);
});
