#![no_main]

use libfuzzer_sys::fuzz_target;
use tilewave::profile::{read_records, write_records};

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = read_records(data) {
        let mut out = Vec::new();
        write_records(&records, &mut out).unwrap();
        assert_eq!(read_records(out.as_slice()).unwrap(), records);
    }
});
