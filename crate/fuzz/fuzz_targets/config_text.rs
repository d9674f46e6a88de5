#![no_main]

use libfuzzer_sys::fuzz_target;
use pick_kie::model::ModelConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(c) = ModelConfig::parse_text(text) {
        assert_eq!(ModelConfig::parse_text(&c.to_text()).expect("round trip"), c);
    }
});
