#![no_main]
use libfuzzer_sys::fuzz_target;
use patchfm::series::parse_jsonl;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(series) = parse_jsonl(text) else { return };
    // Whatever parses must survive a write/read round trip unchanged.
    let written: String = series
        .iter()
        .map(|s| serde_json::to_string(s).unwrap() + "\n")
        .collect();
    let again = parse_jsonl(&written).expect("re-parse of written series");
    assert_eq!(series, again);
});
