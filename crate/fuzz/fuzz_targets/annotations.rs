#![no_main]

use kern_core::dataset::{format_annotations, parse_annotations};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(images) = parse_annotations(text) {
        // whatever parses must survive a rewrite unchanged
        let again = parse_annotations(&format_annotations(&images)).expect("rewritten annotations parse");
        assert_eq!(again, images);
    }
});
