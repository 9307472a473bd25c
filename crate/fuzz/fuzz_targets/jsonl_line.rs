#![no_main]

use libfuzzer_sys::fuzz_target;
use undercali::imts_data::{parse_jsonl_line, sample_to_json};

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    if let Ok(sample) = parse_jsonl_line(line, 1) {
        // Anything accepted must survive a serialize/reparse cycle intact.
        let again = parse_jsonl_line(&sample_to_json(&sample), 1).expect("round trip");
        assert_eq!(again, sample);
    }
});
