#![no_main]

use libfuzzer_sys::fuzz_target;
use pick_kie::encoding::Vocabulary;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(v) = Vocabulary::from_json(text) {
        assert_eq!(Vocabulary::from_json(&v.to_json()).expect("round trip"), v);
    }
});
