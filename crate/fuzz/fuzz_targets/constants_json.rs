#![no_main]

use ddmpc::constants::SystemConstants;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(c) = SystemConstants::from_json_str(text) {
        let json = c.to_json_string().expect("serialise");
        assert_eq!(SystemConstants::from_json_str(&json).expect("own output parses"), c);
    }
});
