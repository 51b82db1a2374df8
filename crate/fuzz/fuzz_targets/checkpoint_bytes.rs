#![no_main]

use kern_core::tensor::ParameterSet;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(params) = ParameterSet::from_bytes(data) {
        let bytes = params.to_bytes();
        let again = ParameterSet::from_bytes(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.to_bytes(), bytes);
    }
});
