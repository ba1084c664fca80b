#![no_main]

use libfuzzer_sys::fuzz_target;
use tilewave::SamplingPlan;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(plan) = SamplingPlan::from_json(text) {
            let again = SamplingPlan::from_json(&plan.to_json().unwrap()).unwrap();
            assert_eq!(plan, again);
        }
    }
});
