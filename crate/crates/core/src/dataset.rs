//! Annotated images, the category/predicate schema, and their text formats.
//!
//! Annotations are JSON lines, one image per line:
//!
//! ```text
//! {"image_id":"img0","width":64,"height":48,
//!  "objects":[{"box":[x1,y1,x2,y2],"label":3,"feature":[...]}],
//!  "relations":[{"subj":0,"obj":1,"predicate":2}]}
//! ```
//!
//! The schema is a single JSON object `{"categories":[..],"predicates":[..]}`
//! whose first predicate is always `"no-relationship"`.

use std::collections::HashSet;
use std::fs;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::write_atomic;

pub const NO_RELATIONSHIP: &str = "no-relationship";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub categories: Vec<String>,
    pub predicates: Vec<String>,
}

impl DatasetSchema {
    /// Schema with generated names `cat0..`, `pred1..`.
    pub fn synthetic(num_categories: usize, num_predicates: usize) -> Self {
        let categories = (0..num_categories).map(|c| format!("cat{c}")).collect();
        let predicates = std::iter::once(NO_RELATIONSHIP.to_string())
            .chain((1..num_predicates).map(|k| format!("pred{k}")))
            .collect();
        DatasetSchema {
            categories,
            predicates,
        }
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    /// Predicate classes including no-relationship at index 0.
    pub fn num_predicates(&self) -> usize {
        self.predicates.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::Validation("schema needs at least one category".into()));
        }
        if self.predicates.len() < 2 {
            return Err(Error::Validation(
                "schema needs no-relationship plus at least one predicate".into(),
            ));
        }
        if self.predicates[0] != NO_RELATIONSHIP {
            return Err(Error::Validation(format!(
                "predicates[0] must be {NO_RELATIONSHIP:?}, found {:?}",
                self.predicates[0]
            )));
        }
        for (kind, names) in [("category", &self.categories), ("predicate", &self.predicates)] {
            let mut seen = HashSet::new();
            if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
                return Err(Error::Validation(format!("duplicate {kind} name {dup:?}")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schema: DatasetSchema = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Self> {
        DatasetSchema::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("schema serializes");
        write_atomic(path, (text + "\n").as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    /// `[x1, y1, x2, y2]` in pixels.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub label: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub feature: Vec<f64>,
}

impl Region {
    pub fn area(&self) -> f64 {
        box_area(&self.bbox)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub subj: usize,
    pub obj: usize,
    pub predicate: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedImage {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    #[serde(rename = "objects")]
    pub regions: Vec<Region>,
    #[serde(rename = "relations", default)]
    pub triplets: Vec<Triplet>,
}

impl AnnotatedImage {
    pub fn labels(&self) -> Vec<usize> {
        self.regions.iter().map(|r| r.label).collect()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.regions.first().map(|r| r.feature.len())
    }

    /// Annotated predicate of the ordered pair, or 0 when unannotated.
    pub fn predicate_of(&self, subj: usize, obj: usize) -> usize {
        self.triplets
            .iter()
            .find(|t| t.subj == subj && t.obj == obj)
            .map_or(0, |t| t.predicate)
    }

    /// Checks every structural invariant against `schema`.
    pub fn validate(&self, schema: &DatasetSchema) -> Result<()> {
        let id = &self.image_id;
        let fail = |msg: String| Err(Error::Validation(format!("image {id}: {msg}")));
        let (w, h) = (self.width as f64, self.height as f64);
        let c = schema.num_categories();
        let d_f = self.feature_dim().unwrap_or(0);
        for (i, r) in self.regions.iter().enumerate() {
            let [x1, y1, x2, y2] = r.bbox;
            let in_bounds = 0.0 <= x1 && x1 < x2 && x2 <= w && 0.0 <= y1 && y1 < y2 && y2 <= h;
            if !in_bounds {
                return fail(format!("region {i} box {:?} outside {}x{}", r.bbox, self.width, self.height));
            }
            if r.label >= c {
                return fail(format!("region {i} label {} out of range for {c} categories", r.label));
            }
            if r.feature.len() != d_f {
                return fail(format!("region {i} feature length {} != {d_f}", r.feature.len()));
            }
            if r.feature.iter().any(|v| !v.is_finite()) {
                return fail(format!("region {i} has a non-finite feature"));
            }
        }
        let n = self.regions.len();
        let k = schema.num_predicates();
        let mut pairs = HashSet::new();
        for t in &self.triplets {
            if t.subj >= n || t.obj >= n {
                return fail(format!("triplet {t:?} references a missing region"));
            }
            if t.subj == t.obj {
                return fail(format!("triplet {t:?} relates a region to itself"));
            }
            if t.predicate == 0 || t.predicate >= k {
                return fail(format!("triplet {t:?} predicate outside [1, {k})"));
            }
            if !pairs.insert((t.subj, t.obj)) {
                return fail(format!("pair ({}, {}) annotated twice", t.subj, t.obj));
            }
        }
        Ok(())
    }
}

pub fn box_area(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let inter = box_area(&[a[0].max(b[0]), a[1].max(b[1]), a[2].min(b[2]), a[3].min(b[3])]);
    let union = box_area(a) + box_area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Parses JSON-lines annotations; blank lines are skipped.
pub fn parse_annotations(text: &str) -> Result<Vec<AnnotatedImage>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotatedImage>> {
    parse_annotations(&fs::read_to_string(path)?)
}

/// One JSON object per line.
pub fn format_annotations(images: &[AnnotatedImage]) -> String {
    let mut out = String::new();
    for img in images {
        out.push_str(&serde_json::to_string(img).expect("annotations serialize"));
        out.push('\n');
    }
    out
}

pub fn write_annotations(path: &Path, images: &[AnnotatedImage]) -> Result<()> {
    write_atomic(path, format_annotations(images).as_bytes())
}

/// Validates every image and checks that all share one feature length.
pub fn validate_dataset(images: &[AnnotatedImage], schema: &DatasetSchema) -> Result<Option<usize>> {
    let mut d_f = None;
    for img in images {
        img.validate(schema)?;
        if let Some(d) = img.feature_dim() {
            match d_f {
                None => d_f = Some(d),
                Some(prev) if prev != d => {
                    return Err(Error::Validation(format!(
                        "image {}: feature length {d} differs from {prev}",
                        img.image_id
                    )))
                }
                _ => {}
            }
        }
    }
    Ok(d_f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image() -> AnnotatedImage {
        AnnotatedImage {
            image_id: "a".into(),
            width: 10,
            height: 10,
            regions: vec![
                Region {
                    bbox: [0.0, 0.0, 5.0, 5.0],
                    label: 0,
                    feature: vec![1.0],
                },
                Region {
                    bbox: [2.0, 2.0, 10.0, 10.0],
                    label: 1,
                    feature: vec![2.0],
                },
            ],
            triplets: vec![Triplet {
                subj: 0,
                obj: 1,
                predicate: 1,
            }],
        }
    }

    #[test]
    fn schema_rules() {
        let s = DatasetSchema::synthetic(2, 3);
        s.validate().unwrap();
        let mut bad = s.clone();
        bad.predicates[0] = "none".into();
        assert!(bad.validate().is_err());
        let mut dup = s.clone();
        dup.categories[1] = "cat0".into();
        assert!(dup.validate().is_err());
        assert!(DatasetSchema::synthetic(0, 3).validate().is_err());
        assert!(DatasetSchema::synthetic(1, 1).validate().is_err());
    }

    #[test]
    fn image_invariants() {
        let s = DatasetSchema::synthetic(2, 3);
        image().validate(&s).unwrap();

        let mut img = image();
        img.regions[0].bbox = [3.0, 0.0, 3.0, 5.0];
        assert!(img.validate(&s).is_err());

        let mut img = image();
        img.triplets[0].predicate = 0;
        assert!(img.validate(&s).is_err());

        let mut img = image();
        img.triplets.push(img.triplets[0]);
        assert!(img.validate(&s).is_err());

        let mut img = image();
        img.triplets[0].obj = 0;
        assert!(img.validate(&s).is_err());

        let mut img = image();
        img.regions[1].label = 2;
        let err = img.validate(&s).unwrap_err().to_string();
        assert!(err.contains("image a"), "{err}");
    }

    #[test]
    fn jsonl_round_trip_and_line_numbers() {
        let text = serde_json::to_string(&image()).unwrap();
        assert!(text.contains("\"box\""));
        assert!(text.contains("\"relations\""));
        let two = format!("{text}\n\n{text}\n");
        assert_eq!(parse_annotations(&two).unwrap().len(), 2);
        let broken = format!("{text}\n{{\"image_id\": 3}}\n");
        match parse_annotations(&broken) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn feature_is_optional() {
        let line = r#"{"image_id":"x","width":4,"height":4,"objects":[{"box":[0,0,1,1],"label":0}],"relations":[]}"#;
        let imgs = parse_annotations(line).unwrap();
        assert!(imgs[0].regions[0].feature.is_empty());
    }

    #[test]
    fn iou_cases() {
        assert_eq!(iou(&[0.0, 0.0, 2.0, 2.0], &[0.0, 0.0, 2.0, 2.0]), 1.0);
        assert_eq!(iou(&[0.0, 0.0, 1.0, 1.0], &[2.0, 2.0, 3.0, 3.0]), 0.0);
        assert!((iou(&[0.0, 0.0, 2.0, 2.0], &[1.0, 1.0, 3.0, 3.0]) - 1.0 / 7.0).abs() < 1e-15);
    }
}
