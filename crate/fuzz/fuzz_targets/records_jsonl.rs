#![no_main]

use libfuzzer_sys::fuzz_target;
use p2d_runner::metrics::{evaluate_records, records_from_jsonl, EvalSettings, Subset};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(frames) = records_from_jsonl(text) {
        let settings = EvalSettings { thresholds: vec![0.5, 1.0, 2.0, 4.0], num_classes: 3 };
        let _ = evaluate_records(&frames, &settings, Subset::All);
    }
});
