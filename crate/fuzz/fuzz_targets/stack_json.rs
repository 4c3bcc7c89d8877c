#![no_main]

use libfuzzer_sys::fuzz_target;
use strata::DescriptionStack;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(stack) = DescriptionStack::from_json(text) {
        let again = DescriptionStack::from_json(&stack.to_json()).expect("written stack parses");
        assert_eq!(again, stack);
    }
});
