#![no_main]

use fasgen_core::gp::FitFile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(fit) = FitFile::from_toml(text) {
            let again = FitFile::from_toml(&fit.to_toml()).expect("written fit file parses");
            assert_eq!(again, fit);
        }
    }
});
