#![no_main]

use fasgen_core::dataset::parse_frequencies;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(f) = parse_frequencies(text) {
            assert!(f.iter().all(|v| v.is_finite() && *v > 0.0));
            assert!(f.windows(2).all(|w| w[0] < w[1]));
        }
    }
});
