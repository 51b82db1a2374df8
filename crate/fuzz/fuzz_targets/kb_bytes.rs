#![no_main]

use kern_core::knowledge::KnowledgeBase;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(kb) = KnowledgeBase::from_bytes(data) {
        kb.check_invariants().expect("decoded knowledge base is valid");
        let bytes = kb.to_bytes();
        assert_eq!(KnowledgeBase::from_bytes(&bytes).expect("re-encoded kb decodes"), kb);
    }
});
