#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let (doc, spec) = text.split_once('\n').unwrap_or(("{}", text));
        if let Ok(mut value) = serde_json::from_str::<serde_json::Value>(doc) {
            let _ = coefavg::config::apply_override(&mut value, spec);
        }
    }
});
