#![no_main]

use libfuzzer_sys::fuzz_target;
use pick_kie::data::parse_predictions;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_predictions(text);
    }
});
