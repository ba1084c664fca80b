#![no_main]

use libfuzzer_sys::fuzz_target;
use tilewave::sim::SimExperiment;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(exp) = SimExperiment::from_json(text) {
            // Keep runs short; validation is the point.
            if exp.g_range[1] - exp.g_range[0] < 64 && exp.g_range[1] < 4096 && exp.repetitions <= 4 {
                for row in exp.run() {
                    assert!(row.latency_us > 0.0);
                }
            }
        }
    }
});
