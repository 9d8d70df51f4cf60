#![no_main]

use glacier_core::sampling::{specs_from_csv, specs_to_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(specs) = specs_from_csv(text) {
        assert_eq!(specs_from_csv(&specs_to_csv(&specs)).expect("written specs parse"), specs);
    }
});
