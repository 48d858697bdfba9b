#![no_main]

use ddmpc::lti::PlantSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = PlantSpec::from_json_str(text) {
        let _ = spec.to_model();
    }
});
