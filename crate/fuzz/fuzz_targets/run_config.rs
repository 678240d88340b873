#![no_main]
use libfuzzer_sys::fuzz_target;
use patchfm::config::RunConfig;

// Lines before the first `{` line are treated as `--set` overrides.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let split = text.find('{').unwrap_or(text.len());
    let overrides: Vec<String> = text[..split].lines().map(str::to_string).collect();
    if let Ok(cfg) = RunConfig::from_json(&text[split..], &overrides) {
        let _ = cfg.hash();
        let _ = cfg.model_config();
    }
});
