#![no_main]

use fasgen_core::cgm::{parse_checkpoint, write_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = parse_checkpoint(data) {
        let bytes = write_checkpoint(&model);
        let again = parse_checkpoint(&bytes).expect("written checkpoint parses");
        assert_eq!(write_checkpoint(&again), bytes);
    }
});
