#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = deep_bsde::config::parse(text) {
            if let Ok(resolved) = cfg.resolve() {
                let again = deep_bsde::config::render_resolved(&resolved);
                let back = deep_bsde::config::parse(&again)
                    .and_then(|c| c.resolve())
                    .expect("rendered config must resolve");
                assert_eq!(back.problem().dims, resolved.problem().dims);
            }
        }
    }
});
