#![no_main]

use fasgen_core::dataset::{dataset_csv, parse_dataset, parse_frequencies};
use libfuzzer_sys::fuzz_target;

// Input: frequency list, a NUL byte, then the dataset CSV.
fuzz_target!(|data: &[u8]| {
    let Some(split) = data.iter().position(|b| *b == 0) else { return };
    let Ok(freq_text) = std::str::from_utf8(&data[..split]) else { return };
    let Ok(freqs) = parse_frequencies(freq_text) else { return };
    if let Ok(ds) = parse_dataset(&data[split + 1..], &freqs, None) {
        let text = dataset_csv(&ds);
        let again = parse_dataset(text.as_bytes(), &freqs, None).expect("written dataset parses");
        assert_eq!(again.len(), ds.len());
    }
});
