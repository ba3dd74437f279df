#![no_main]

use dsm_core::model::{parse_model, write_model};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(model) = parse_model(text) {
        let mut out = Vec::new();
        write_model(&model, &mut out).expect("writing to a Vec");
        let again = parse_model(std::str::from_utf8(&out).unwrap()).expect("re-parse of written model");
        assert_eq!(again, model);
    }
});
