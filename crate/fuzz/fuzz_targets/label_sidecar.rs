#![no_main]

use libfuzzer_sys::fuzz_target;
use strata::LabelMap;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(map) = LabelMap::from_sidecar(text) {
        let again = LabelMap::from_sidecar(&map.to_sidecar()).expect("written sidecar parses");
        assert_eq!(again, map);
    }
});
