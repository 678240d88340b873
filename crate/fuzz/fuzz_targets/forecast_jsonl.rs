#![no_main]
use libfuzzer_sys::fuzz_target;
use patchfm::eval::parse_forecast_jsonl;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_forecast_jsonl(text) {
        for r in &records {
            let _ = r.horizon();
        }
    }
});
