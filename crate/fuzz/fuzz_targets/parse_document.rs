#![no_main]

use libfuzzer_sys::fuzz_target;
use pick_kie::data::{document_to_json, parse_document};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(doc) = parse_document(text) {
        // anything accepted must survive a round trip
        let again = parse_document(&document_to_json(&doc)).expect("round trip");
        assert_eq!(again, doc);
    }
});
