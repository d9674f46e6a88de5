#![no_main]

use libfuzzer_sys::fuzz_target;
use pick_kie::data::{decode_png, encode_png};

fuzz_target!(|data: &[u8]| {
    if let Ok(crop) = decode_png(data) {
        assert_eq!(decode_png(&encode_png(&crop)).expect("round trip"), crop);
    }
});
