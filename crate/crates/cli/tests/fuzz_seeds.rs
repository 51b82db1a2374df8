//! Replays the checked-in fuzz corpus through the same checks the fuzz
//! targets make, so regressions on any seed show up in the normal test run.

use std::fs;
use std::path::{Path, PathBuf};

use kern_cli::config::RunConfig;
use kern_core::dataset::{format_annotations, parse_annotations, DatasetSchema};
use kern_core::knowledge::KnowledgeBase;
use kern_core::metrics::rank_triplets;
use kern_core::relation_router::parse_predictions;
use kern_core::tensor::ParameterSet;

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .map(|p| {
            let bytes = fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn name(p: &Path) -> &str {
    p.file_name().unwrap().to_str().unwrap()
}

#[test]
fn annotation_seeds() {
    for (path, bytes) in seeds("annotations") {
        let text = std::str::from_utf8(&bytes).unwrap();
        let parsed = parse_annotations(text);
        if let Ok(images) = &parsed {
            assert_eq!(&parse_annotations(&format_annotations(images)).unwrap(), images);
        }
        match name(&path) {
            "synthetic.jsonl" | "empty.jsonl" => assert!(parsed.is_ok(), "{path:?}"),
            // syntactically fine; rejected by schema validation
            "self_loop.jsonl" => {
                let schema = DatasetSchema::synthetic(1, 2);
                assert!(parsed.unwrap()[0].validate(&schema).is_err());
            }
            _ => {}
        }
    }
}

#[test]
fn schema_seeds() {
    for (path, bytes) in seeds("schema") {
        let parsed = DatasetSchema::from_json(std::str::from_utf8(&bytes).unwrap());
        assert_eq!(parsed.is_ok(), name(&path) == "synthetic.json", "{path:?}");
    }
}

#[test]
fn kb_seeds() {
    for (path, bytes) in seeds("kb_bytes") {
        let parsed = KnowledgeBase::from_bytes(&bytes);
        if let Ok(kb) = &parsed {
            kb.check_invariants().unwrap();
            assert_eq!(kb.to_bytes(), bytes);
        }
        assert_eq!(parsed.is_ok(), name(&path) == "synthetic.bin", "{path:?}");
    }
}

#[test]
fn checkpoint_seeds() {
    for (path, bytes) in seeds("checkpoint_bytes") {
        let parsed = ParameterSet::from_bytes(&bytes);
        if let Ok(p) = &parsed {
            assert_eq!(p.to_bytes(), bytes);
        }
        assert_eq!(parsed.is_ok(), name(&path) == "tiny.ckpt", "{path:?}");
    }
}

#[test]
fn prediction_seeds() {
    for (path, bytes) in seeds("predictions") {
        let parsed = parse_predictions(std::str::from_utf8(&bytes).unwrap());
        if let Ok(graphs) = &parsed {
            for g in graphs {
                for constraint in [true, false] {
                    let _ = rank_triplets(g, constraint);
                }
            }
        }
        if name(&path) == "self_pair.jsonl" {
            let graphs = parsed.unwrap();
            assert!(rank_triplets(&graphs[0], true).is_err());
        } else {
            assert!(parsed.is_ok(), "{path:?}");
        }
    }
}

#[test]
fn config_seeds() {
    for (path, bytes) in seeds("config") {
        let cfg = RunConfig::parse(std::str::from_utf8(&bytes).unwrap()).unwrap();
        assert_eq!(cfg.validate().is_ok(), name(&path) != "negative_lr.toml", "{path:?}");
    }
}

fn decode_all(target: &str, bytes: &[u8]) {
    let text = std::str::from_utf8(bytes).ok();
    match target {
        "annotations" => {
            if let Some(Ok(images)) = text.map(parse_annotations) {
                assert_eq!(parse_annotations(&format_annotations(&images)).unwrap(), images);
            }
        }
        "schema" => {
            let _ = text.map(DatasetSchema::from_json);
        }
        "kb_bytes" => {
            if let Ok(kb) = KnowledgeBase::from_bytes(bytes) {
                kb.check_invariants().unwrap();
            }
        }
        "checkpoint_bytes" => {
            if let Ok(p) = ParameterSet::from_bytes(bytes) {
                ParameterSet::from_bytes(&p.to_bytes()).unwrap();
            }
        }
        "predictions" => {
            if let Some(Ok(graphs)) = text.map(parse_predictions) {
                for g in &graphs {
                    let _ = rank_triplets(g, true);
                    let _ = rank_triplets(g, false);
                }
            }
        }
        "config" => {
            if let Some(Ok(cfg)) = text.map(RunConfig::parse) {
                let _ = cfg.validate();
            }
        }
        other => unreachable!("{other}"),
    }
}

const TARGETS: [&str; 6] = ["annotations", "schema", "kb_bytes", "checkpoint_bytes", "predictions", "config"];

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(300))]

    // Cheap stand-in for the fuzzers on a stable toolchain: byte flips and
    // truncations of every seed must decode or fail, never panic.
    #[test]
    fn mutated_seeds_never_panic(
        target in 0usize..TARGETS.len(),
        pick in proptest::prelude::any::<usize>(),
        flips in proptest::collection::vec((proptest::prelude::any::<usize>(), proptest::prelude::any::<u8>()), 0..4),
        cut in proptest::prelude::any::<usize>(),
    ) {
        let all = seeds(TARGETS[target]);
        let mut bytes = all[pick % all.len()].1.clone();
        if !bytes.is_empty() {
            for (at, x) in flips {
                let i = at % bytes.len();
                bytes[i] ^= x;
            }
            bytes.truncate(bytes.len() - cut % (bytes.len() / 4 + 1));
        }
        decode_all(TARGETS[target], &bytes);
    }
}
