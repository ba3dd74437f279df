#![no_main]

use dsm_core::data::{parse_csv_raw, CsvOptions};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let opts = CsvOptions::default();
    if let Ok(raw) = parse_csv_raw(data, &opts) {
        // a table that parsed must either convert or fail cleanly
        let _ = raw.into_dataset();
    }
});
