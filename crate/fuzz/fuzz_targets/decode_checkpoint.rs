#![no_main]

use libfuzzer_sys::fuzz_target;
use pick_kie::model::{checkpoint_precision, decode_checkpoint};

fuzz_target!(|data: &[u8]| {
    let _ = checkpoint_precision(data);
    let _ = decode_checkpoint::<f64>(data);
    let _ = decode_checkpoint::<f32>(data);
});
