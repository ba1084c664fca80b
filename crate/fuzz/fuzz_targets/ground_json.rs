#![no_main]

use libfuzzer_sys::fuzz_target;
use tilewave::SyntheticGround;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(ground) = SyntheticGround::from_json(text) {
            let again = SyntheticGround::from_json(&ground.to_json().unwrap()).unwrap();
            assert_eq!(ground, again);
        }
    }
});
