#![no_main]

use libfuzzer_sys::fuzz_target;
use tilewave::TableSet;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(set) = TableSet::from_json(text) {
            let again = TableSet::from_json(&set.to_json().unwrap()).unwrap();
            assert_eq!(set, again);
        }
    }
});
