#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = coefavg::config::parse_config(text) {
            // anything accepted must survive its own echo
            let echoed = coefavg::config::to_json(&cfg).unwrap();
            let again = coefavg::config::parse_config(&echoed).unwrap();
            assert_eq!(cfg, again);
            let _ = cfg.prepare();
        }
    }
});
