//! Statistical knowledge counted from training annotations.
//!
//! Two tables are kept:
//!
//! * `cooccurrence` (`C × C`): entry `[c][c']` is the fraction of images
//!   containing category `c'` that also contain category `c`. Presence is
//!   image-level and the matrix is directional.
//! * `relation_prior` (`C × C × K`): fiber `[c][c']` is the empirical
//!   distribution of the predicate on ordered region pairs whose subject has
//!   category `c` and object category `c'`. Unannotated pairs count towards
//!   predicate 0 (no-relationship); fibers never observed are uniform.

use std::fs;
use std::path::Path;

use crate::codec::{Reader, Writer};
use crate::dataset::{AnnotatedImage, DatasetSchema};
use crate::error::{Error, Result};
use crate::tensor::write_atomic;

const KB_MAGIC: &[u8] = b"KERNKB1";

/// Fiber sums must hit 1 within this tolerance.
pub const FIBER_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeBase {
    schema: DatasetSchema,
    cooccurrence: Vec<f64>,
    relation_prior: Vec<f64>,
}

/// Integer counts behind a [`KnowledgeBase`]. Partial counts over disjoint
/// image sets merge exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnowledgeCounts {
    c: usize,
    k: usize,
    images: u64,
    presence: Vec<u64>,
    joint: Vec<u64>,
    relations: Vec<u64>,
}

impl KnowledgeCounts {
    pub fn new(schema: &DatasetSchema) -> Self {
        let (c, k) = (schema.num_categories(), schema.num_predicates());
        KnowledgeCounts {
            c,
            k,
            images: 0,
            presence: vec![0; c],
            joint: vec![0; c * c],
            relations: vec![0; c * c * k],
        }
    }

    /// Adds one image. The caller is responsible for validating it first.
    pub fn add_image(&mut self, img: &AnnotatedImage) {
        let (c, k) = (self.c, self.k);
        self.images += 1;
        let mut present = vec![false; c];
        for r in &img.regions {
            present[r.label] = true;
        }
        let cats: Vec<usize> = (0..c).filter(|&x| present[x]).collect();
        for &x in &cats {
            self.presence[x] += 1;
            for &y in &cats {
                self.joint[x * c + y] += 1;
            }
        }

        let n = img.regions.len();
        let mut pred = vec![0usize; n * n];
        for t in &img.triplets {
            pred[t.subj * n + t.obj] = t.predicate;
        }
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let (a, b) = (img.regions[i].label, img.regions[j].label);
                self.relations[(a * c + b) * k + pred[i * n + j]] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &KnowledgeCounts) -> Result<()> {
        if (self.c, self.k) != (other.c, other.k) {
            return Err(Error::dim("merge", &[self.c, self.k], &[other.c, other.k]));
        }
        self.images += other.images;
        for (a, b) in self.presence.iter_mut().zip(&other.presence) {
            *a += b;
        }
        for (a, b) in self.joint.iter_mut().zip(&other.joint) {
            *a += b;
        }
        for (a, b) in self.relations.iter_mut().zip(&other.relations) {
            *a += b;
        }
        Ok(())
    }

    pub fn images(&self) -> u64 {
        self.images
    }

    /// Number of images containing category `c`.
    pub fn presence(&self, c: usize) -> u64 {
        self.presence[c]
    }

    /// Total ordered region pairs observed with labels `(subj, obj)`.
    pub fn pair_total(&self, subj: usize, obj: usize) -> u64 {
        let base = (subj * self.c + obj) * self.k;
        self.relations[base..base + self.k].iter().sum()
    }

    pub fn cooccurrence(&self) -> Vec<f64> {
        let c = self.c;
        let mut out = vec![0.0; c * c];
        for x in 0..c {
            for y in 0..c {
                if self.presence[y] > 0 {
                    out[x * c + y] = self.joint[x * c + y] as f64 / self.presence[y] as f64;
                }
            }
        }
        out
    }

    pub fn relation_prior(&self) -> Vec<f64> {
        let k = self.k;
        let mut out = vec![0.0; self.relations.len()];
        for (fiber, counts) in out.chunks_exact_mut(k).zip(self.relations.chunks_exact(k)) {
            let total: u64 = counts.iter().sum();
            if total == 0 {
                fiber.iter_mut().for_each(|v| *v = 1.0 / k as f64);
            } else {
                for (v, &n) in fiber.iter_mut().zip(counts) {
                    *v = n as f64 / total as f64;
                }
            }
        }
        out
    }

    pub fn finish(&self, schema: &DatasetSchema) -> Result<KnowledgeBase> {
        if self.images == 0 {
            return Err(Error::Validation("cannot count statistics of an empty dataset".into()));
        }
        KnowledgeBase::from_parts(schema.clone(), self.cooccurrence(), self.relation_prior())
    }
}

fn count(images: &[AnnotatedImage], schema: &DatasetSchema) -> Result<KnowledgeCounts> {
    schema.validate()?;
    if images.is_empty() {
        return Err(Error::Validation("cannot count statistics of an empty dataset".into()));
    }
    let mut counts = KnowledgeCounts::new(schema);
    for img in images {
        img.validate(schema)?;
        counts.add_image(img);
    }
    Ok(counts)
}

/// Image-level conditional co-occurrence matrix, row-major `C × C`.
pub fn count_object_cooccurrence(images: &[AnnotatedImage], schema: &DatasetSchema) -> Result<Vec<f64>> {
    Ok(count(images, schema)?.cooccurrence())
}

/// Predicate prior tensor, row-major `C × C × K`.
pub fn count_relation_prior(images: &[AnnotatedImage], schema: &DatasetSchema) -> Result<Vec<f64>> {
    Ok(count(images, schema)?.relation_prior())
}

/// Counts both tables in one pass.
pub fn build_knowledge(images: &[AnnotatedImage], schema: &DatasetSchema) -> Result<KnowledgeBase> {
    count(images, schema)?.finish(schema)
}

/// Counts without building, for callers that also need raw totals.
pub fn count_knowledge(images: &[AnnotatedImage], schema: &DatasetSchema) -> Result<KnowledgeCounts> {
    count(images, schema)
}

/// Which tables an ablation flattens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// Every predicate fiber becomes uniform `1/K`.
    Relation,
    /// Additionally every co-occurrence entry becomes `1/C`.
    RelationAndObject,
}

impl KnowledgeBase {
    pub fn from_parts(schema: DatasetSchema, cooccurrence: Vec<f64>, relation_prior: Vec<f64>) -> Result<Self> {
        schema.validate()?;
        let (c, k) = (schema.num_categories(), schema.num_predicates());
        if cooccurrence.len() != c * c {
            return Err(Error::dim("cooccurrence", &[c, c], &[cooccurrence.len()]));
        }
        if relation_prior.len() != c * c * k {
            return Err(Error::dim("relation_prior", &[c, c, k], &[relation_prior.len()]));
        }
        let kb = KnowledgeBase {
            schema,
            cooccurrence,
            relation_prior,
        };
        kb.check_invariants()?;
        Ok(kb)
    }

    /// Entries in `[0, 1]` and every predicate fiber summing to one.
    pub fn check_invariants(&self) -> Result<()> {
        let in_unit = |v: &f64| v.is_finite() && (0.0..=1.0).contains(v);
        if !self.cooccurrence.iter().all(in_unit) {
            return Err(Error::Validation("co-occurrence entry outside [0, 1]".into()));
        }
        if !self.relation_prior.iter().all(in_unit) {
            return Err(Error::Validation("relation prior entry outside [0, 1]".into()));
        }
        let k = self.num_predicates();
        for (idx, fiber) in self.relation_prior.chunks_exact(k).enumerate() {
            let s: f64 = fiber.iter().sum();
            if (s - 1.0).abs() > FIBER_TOLERANCE {
                let c = self.num_categories();
                return Err(Error::Validation(format!(
                    "fiber ({}, {}) sums to {s}",
                    idx / c,
                    idx % c
                )));
            }
        }
        Ok(())
    }

    pub fn schema(&self) -> &DatasetSchema {
        &self.schema
    }

    pub fn num_categories(&self) -> usize {
        self.schema.num_categories()
    }

    pub fn num_predicates(&self) -> usize {
        self.schema.num_predicates()
    }

    /// Row-major `C × C`.
    pub fn cooccurrence(&self) -> &[f64] {
        &self.cooccurrence
    }

    pub fn cooccurrence_at(&self, c: usize, c_prime: usize) -> f64 {
        self.cooccurrence[c * self.num_categories() + c_prime]
    }

    /// Row-major `C × C × K`.
    pub fn relation_prior(&self) -> &[f64] {
        &self.relation_prior
    }

    pub fn fiber(&self, subj: usize, obj: usize) -> Result<&[f64]> {
        let c = self.num_categories();
        if subj >= c || obj >= c {
            return Err(Error::Validation(format!(
                "label pair ({subj}, {obj}) out of range for {c} categories"
            )));
        }
        let k = self.num_predicates();
        let base = (subj * c + obj) * k;
        Ok(&self.relation_prior[base..base + k])
    }

    /// The FREQ baseline's predicate distribution for a labelled pair.
    ///
    /// With `exclude_norel` the no-relationship entry is dropped and the rest
    /// renormalised (uniform over real predicates if nothing remains).
    pub fn freq_predict(&self, subj: usize, obj: usize, exclude_norel: bool) -> Result<Vec<f64>> {
        let mut dist = self.fiber(subj, obj)?.to_vec();
        if exclude_norel {
            dist[0] = 0.0;
            let rest: f64 = dist.iter().sum();
            let k = dist.len();
            if rest > 0.0 {
                dist.iter_mut().for_each(|v| *v /= rest);
            } else {
                dist.iter_mut().skip(1).for_each(|v| *v = 1.0 / (k - 1) as f64);
            }
        }
        Ok(dist)
    }

    /// Copy with the chosen tables replaced by uniform distributions.
    pub fn make_uniform_ablation(&self, ablation: Ablation) -> KnowledgeBase {
        let (c, k) = (self.num_categories(), self.num_predicates());
        let mut out = self.clone();
        out.relation_prior.iter_mut().for_each(|v| *v = 1.0 / k as f64);
        if ablation == Ablation::RelationAndObject {
            out.cooccurrence.iter_mut().for_each(|v| *v = 1.0 / c as f64);
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(KB_MAGIC);
        w.u32(self.num_categories() as u32);
        w.u32(self.num_predicates() as u32);
        for name in self.schema.categories.iter().chain(&self.schema.predicates) {
            w.str(name);
        }
        w.f64s(&self.cooccurrence);
        w.f64s(&self.relation_prior);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, KB_MAGIC)?;
        let c = r.u32()? as usize;
        let k = r.u32()? as usize;
        // every name costs at least its 4-byte length prefix
        if c.saturating_add(k).saturating_mul(4) > r.remaining() {
            return Err(Error::Format(format!("header claims C={c}, K={k} beyond file size")));
        }
        let categories = (0..c).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let predicates = (0..k).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let cc = c.checked_mul(c);
        let cck = cc.and_then(|x| x.checked_mul(k));
        let (Some(cc), Some(cck)) = (cc, cck) else {
            return Err(Error::Format("table size overflow".into()));
        };
        if cc.saturating_add(cck).saturating_mul(8) != r.remaining() {
            return Err(Error::Format(format!(
                "payload is {} bytes, expected {} for C={c}, K={k}",
                r.remaining(),
                (cc + cck) * 8
            )));
        }
        let cooccurrence = r.f64s(cc)?;
        let relation_prior = r.f64s(cck)?;
        r.expect_end()?;
        let schema = DatasetSchema {
            categories,
            predicates,
        };
        KnowledgeBase::from_parts(schema, cooccurrence, relation_prior)
            .map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        KnowledgeBase::from_bytes(&fs::read(path)?)
    }

    /// Shannon entropy (nats) of every predicate fiber, row-major `C × C`.
    pub fn fiber_entropies(&self) -> Vec<f64> {
        self.relation_prior
            .chunks_exact(self.num_predicates())
            .map(|f| -f.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Region, Triplet};

    fn region(label: usize) -> Region {
        Region {
            bbox: [0.0, 0.0, 1.0, 1.0],
            label,
            feature: vec![],
        }
    }

    fn img(id: &str, labels: &[usize], triplets: &[(usize, usize, usize)]) -> AnnotatedImage {
        AnnotatedImage {
            image_id: id.into(),
            width: 2,
            height: 2,
            regions: labels.iter().map(|&l| region(l)).collect(),
            triplets: triplets
                .iter()
                .map(|&(subj, obj, predicate)| Triplet { subj, obj, predicate })
                .collect(),
        }
    }

    const PERSON: usize = 0;
    const DOG: usize = 1;
    const HORSE: usize = 2;
    const CAT: usize = 3;
    const RIDE: usize = 1;

    #[test]
    fn cooccurrence_hand_enumeration() {
        let schema = DatasetSchema::synthetic(2, 2);
        let images = [img("a", &[PERSON, DOG], &[]), img("b", &[PERSON], &[])];
        let m = count_object_cooccurrence(&images, &schema).unwrap();
        // m[c][c'] = P(c present | c' present)
        assert_eq!(m[DOG * 2 + PERSON], 0.5);
        assert_eq!(m[PERSON * 2 + DOG], 1.0);
        assert_eq!(m[PERSON * 2 + PERSON], 1.0);
        assert_eq!(m[DOG * 2 + DOG], 1.0);
    }

    #[test]
    fn cooccurrence_single_object_and_saturation() {
        let schema = DatasetSchema::synthetic(3, 2);
        let m = count_object_cooccurrence(&[img("a", &[1], &[])], &schema).unwrap();
        assert_eq!(m[1 * 3 + 1], 1.0);
        assert_eq!(m.iter().sum::<f64>(), 1.0);

        let full = [img("a", &[0, 1, 2], &[]), img("b", &[2, 1, 0, 0], &[])];
        let m = count_object_cooccurrence(&full, &schema).unwrap();
        assert!(m.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn relation_prior_hand_enumeration() {
        let schema = DatasetSchema::synthetic(4, 3);
        let images = [img("a", &[PERSON, HORSE], &[(0, 1, RIDE)])];
        let kb = build_knowledge(&images, &schema).unwrap();
        assert_eq!(kb.fiber(PERSON, HORSE).unwrap(), &[0.0, 1.0, 0.0]);
        assert_eq!(kb.fiber(HORSE, PERSON).unwrap(), &[1.0, 0.0, 0.0]);
        assert_eq!(kb.fiber(CAT, DOG).unwrap(), &[1.0 / 3.0; 3]);
    }

    #[test]
    fn no_triplets_means_one_hot_no_relationship() {
        let schema = DatasetSchema::synthetic(3, 4);
        let images = [img("a", &[0, 1, 1], &[]), img("b", &[2, 0], &[])];
        let kb = build_knowledge(&images, &schema).unwrap();
        for (s, o) in [(0, 1), (1, 0), (1, 1), (2, 0), (0, 2)] {
            assert_eq!(kb.fiber(s, o).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn errors() {
        let schema = DatasetSchema::synthetic(2, 2);
        assert!(build_knowledge(&[], &schema).is_err());
        let err = build_knowledge(&[img("bad-img", &[5], &[])], &schema).unwrap_err();
        assert!(err.to_string().contains("bad-img"));
    }

    #[test]
    fn freq_predict_cases() {
        let schema = DatasetSchema::synthetic(1, 3);
        let kb = KnowledgeBase::from_parts(schema.clone(), vec![1.0], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(kb.freq_predict(0, 0, false).unwrap(), vec![0.0, 1.0, 0.0]);

        let kb = KnowledgeBase::from_parts(schema.clone(), vec![1.0], vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(kb.freq_predict(0, 0, true).unwrap(), vec![0.0, 0.5, 0.5]);

        let kb = KnowledgeBase::from_parts(schema, vec![1.0], vec![0.5, 0.3, 0.2]).unwrap();
        let d = kb.freq_predict(0, 0, true).unwrap();
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 0.6).abs() < 1e-15 && (d[2] - 0.4).abs() < 1e-15);
        assert!(kb.freq_predict(1, 0, false).is_err());
    }

    #[test]
    fn ablation_cases() {
        let schema = DatasetSchema::synthetic(4, 2);
        let images = [img("a", &[0, 1, 2], &[]), img("b", &[3, 3], &[])];
        let kb = build_knowledge(&images, &schema).unwrap();
        let rel = kb.make_uniform_ablation(Ablation::Relation);
        assert!(rel.relation_prior().iter().all(|&v| v == 0.5));
        assert_eq!(rel.cooccurrence(), kb.cooccurrence());
        let both = kb.make_uniform_ablation(Ablation::RelationAndObject);
        assert!(both.cooccurrence().iter().all(|&v| v == 0.25));
        assert_eq!(both.make_uniform_ablation(Ablation::RelationAndObject), both);
        assert_eq!(rel.make_uniform_ablation(Ablation::Relation), rel);
        rel.check_invariants().unwrap();
    }

    #[test]
    fn file_round_trip_and_magic() {
        let schema = DatasetSchema::synthetic(3, 3);
        let images = [img("a", &[0, 1, 2], &[(0, 1, 2), (2, 0, 1)])];
        let kb = build_knowledge(&images, &schema).unwrap();
        let bytes = kb.to_bytes();
        let back = KnowledgeBase::from_bytes(&bytes).unwrap();
        assert_eq!(back, kb);
        assert_eq!(back.to_bytes(), bytes);

        let mut bad = bytes.clone();
        bad[..7].copy_from_slice(b"KERNKB2");
        assert!(matches!(KnowledgeBase::from_bytes(&bad), Err(Error::Format(_))));
        assert!(KnowledgeBase::from_bytes(&bytes[..bytes.len() - 20]).is_err());
        let mut flipped = bytes;
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(KnowledgeBase::from_bytes(&flipped), Err(Error::Format(_))));
    }

    #[test]
    fn partial_counts_merge_exactly() {
        let schema = DatasetSchema::synthetic(3, 3);
        let a = [img("a", &[0, 1], &[(0, 1, 1)])];
        let b = [img("b", &[1, 2, 2], &[(2, 1, 2)])];
        let mut ca = count_knowledge(&a, &schema).unwrap();
        ca.merge(&count_knowledge(&b, &schema).unwrap()).unwrap();
        let all = count_knowledge(&[a[0].clone(), b[0].clone()], &schema).unwrap();
        assert_eq!(ca, all);
    }
}
