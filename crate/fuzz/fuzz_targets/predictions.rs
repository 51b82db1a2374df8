#![no_main]

use kern_core::metrics::rank_triplets;
use kern_core::relation_router::parse_predictions;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(graphs) = parse_predictions(text) {
        for g in &graphs {
            for constraint in [true, false] {
                let _ = rank_triplets(g, constraint);
            }
        }
    }
});
