#![no_main]

use libfuzzer_sys::fuzz_target;
use tilewave::ConfigRegistry;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(reg) = ConfigRegistry::from_json(text) {
            let again = ConfigRegistry::from_json(&reg.to_json().unwrap()).unwrap();
            assert_eq!(reg, again);
        }
    }
});
