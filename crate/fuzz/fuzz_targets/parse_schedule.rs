#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(s) = coefavg::coefficients::parse_schedule(text) {
            let (a, b) = s.span();
            let _ = s.eval((a + b) / 2.0);
            let _ = s.integral(a, b);
        }
    }
});
