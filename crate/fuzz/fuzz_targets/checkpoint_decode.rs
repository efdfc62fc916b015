#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    if let Ok(params) = deep_bsde::checkpoint::decode(&text) {
        let encoded = deep_bsde::checkpoint::encode(&params);
        assert_eq!(deep_bsde::checkpoint::decode(&encoded).unwrap(), params);
    }
});
