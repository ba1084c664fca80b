#![no_main]

use libfuzzer_sys::fuzz_target;
use tilewave::kernel::parse_workloads;
use tilewave::KernelWorkload;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(list) = parse_workloads(text) {
            for x in list {
                let again: KernelWorkload = x.to_string().parse().unwrap();
                assert_eq!(x, again);
            }
        }
    }
});
