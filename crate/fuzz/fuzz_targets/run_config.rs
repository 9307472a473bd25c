#![no_main]

use libfuzzer_sys::fuzz_target;
use undercali::config::{parse_config, to_text};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = parse_config(text) {
        // The canonical serialization of any accepted config parses back
        // to an equal config.
        let again = parse_config(&to_text(&cfg)).expect("canonical text parses");
        assert_eq!(again, cfg);
    }
});
