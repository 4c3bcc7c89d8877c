#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Err(e) = strata::parse_kb(text) {
        // locations, when present, point inside the input
        if let Some(at) = e.location() {
            assert!(at.line >= 1 && at.line <= text.lines().count().max(1) + 1);
        }
    }
});
