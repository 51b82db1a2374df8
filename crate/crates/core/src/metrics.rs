//! Triplet ranking and R@K / mR@K evaluation.
//!
//! A predicted triplet `(i, j, k)` is scored `P(o_i)·P(o_j)·P(k | i, j)` where
//! `P(o_i)` is the probability of region `i`'s most likely label. With the
//! graph constraint only each pair's best real predicate is ranked; without
//! it, every predicate `k ≥ 1` is. Ground truth is matched greedily in rank
//! order, one prediction per ground-truth triplet and vice versa.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{iou, AnnotatedImage, DatasetSchema};
use crate::error::{Error, Result};
use crate::model::Task;
use crate::relation_router::PredictedGraph;

pub const DEFAULT_KS: [usize; 3] = [20, 50, 100];
const PROB_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum MatchMode {
    /// Same region indices on both sides.
    Index,
    /// Both boxes overlap their ground-truth counterparts with IoU at least the threshold.
    Iou(f64),
}

/// How per-predicate recalls are pooled before averaging over predicates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Recall per image, averaged over images containing the predicate.
    #[default]
    PerImage,
    /// Hits over all ground-truth instances of the predicate in the set.
    Pooled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedTriplet {
    pub subj_idx: usize,
    pub obj_idx: usize,
    pub predicate: usize,
    pub score: f64,
    pub subj_label: usize,
    pub obj_label: usize,
    pub subj_box: Option<[f64; 4]>,
    pub obj_box: Option<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtTriplet {
    pub subj_idx: usize,
    pub obj_idx: usize,
    pub predicate: usize,
    pub subj_label: usize,
    pub obj_label: usize,
    pub subj_box: [f64; 4],
    pub obj_box: [f64; 4],
}

pub fn gt_triplets(image: &AnnotatedImage) -> Vec<GtTriplet> {
    image
        .triplets
        .iter()
        .map(|t| GtTriplet {
            subj_idx: t.subj,
            obj_idx: t.obj,
            predicate: t.predicate,
            subj_label: image.regions[t.subj].label,
            obj_label: image.regions[t.obj].label,
            subj_box: image.regions[t.subj].bbox,
            obj_box: image.regions[t.obj].bbox,
        })
        .collect()
}

fn check_distribution(what: &str, image_id: &str, probs: &[f64]) -> Result<()> {
    if let Some(p) = probs.iter().find(|p| !(-PROB_SLACK..=1.0 + PROB_SLACK).contains(*p)) {
        return Err(Error::Validation(format!(
            "image {image_id}: {what} probability {p} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Ranks candidate triplets by score, descending; ties break on
/// `(subj, obj, predicate)` ascending.
pub fn rank_triplets(pred: &PredictedGraph, constraint: bool) -> Result<Vec<RankedTriplet>> {
    let id = &pred.image_id;
    let n = pred.objects.len();
    for p in &pred.objects {
        check_distribution("object", id, p)?;
    }
    if let Some(b) = &pred.boxes {
        if b.len() != n {
            return Err(Error::Validation(format!("image {id}: {} boxes for {n} regions", b.len())));
        }
    }
    let best: Vec<(usize, f64)> = pred
        .objects
        .iter()
        .map(|p| {
            let l = crate::object_router::argmax(p);
            (l, p.get(l).copied().unwrap_or(0.0))
        })
        .collect();
    let boxed = |i: usize| pred.boxes.as_ref().map(|b| b[i]);

    let mut out = Vec::new();
    for pair in &pred.pairs {
        check_distribution("predicate", id, &pair.probs)?;
        if pair.subj >= n || pair.obj >= n || pair.subj == pair.obj {
            return Err(Error::Validation(format!(
                "image {id}: pair ({}, {}) invalid for {n} regions",
                pair.subj, pair.obj
            )));
        }
        if pair.probs.len() < 2 {
            return Err(Error::Validation(format!("image {id}: predicate distribution too short")));
        }
        let (ls, ps) = best[pair.subj];
        let (lo, po) = best[pair.obj];
        let mut push = |k: usize| {
            out.push(RankedTriplet {
                subj_idx: pair.subj,
                obj_idx: pair.obj,
                predicate: k,
                score: ps * po * pair.probs[k],
                subj_label: ls,
                obj_label: lo,
                subj_box: boxed(pair.subj),
                obj_box: boxed(pair.obj),
            })
        };
        if constraint {
            let k = 1 + crate::object_router::argmax(&pair.probs[1..]);
            push(k);
        } else {
            (1..pair.probs.len()).for_each(&mut push);
        }
    }
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then((a.subj_idx, a.obj_idx, a.predicate).cmp(&(b.subj_idx, b.obj_idx, b.predicate)))
    });
    Ok(out)
}

fn matches(p: &RankedTriplet, g: &GtTriplet, mode: MatchMode) -> bool {
    if p.predicate != g.predicate || p.subj_label != g.subj_label || p.obj_label != g.obj_label {
        return false;
    }
    match mode {
        MatchMode::Index => p.subj_idx == g.subj_idx && p.obj_idx == g.obj_idx,
        MatchMode::Iou(tau) => match (p.subj_box, p.obj_box) {
            (Some(sb), Some(ob)) => iou(&sb, &g.subj_box) >= tau && iou(&ob, &g.obj_box) >= tau,
            _ => false,
        },
    }
}

/// Hit flag per ground-truth triplet for the top `k` predictions.
pub fn match_top_k(ranked: &[RankedTriplet], gt: &[GtTriplet], k: usize, mode: MatchMode) -> Vec<bool> {
    let mut hit = vec![false; gt.len()];
    for p in ranked.iter().take(k) {
        if let Some(g) = (0..gt.len()).find(|&g| !hit[g] && matches(p, &gt[g], mode)) {
            hit[g] = true;
        }
    }
    hit
}

/// Fraction of ground truth recovered in the top `k`; `None` when there is
/// no ground truth.
pub fn recall_at_k(ranked: &[RankedTriplet], gt: &[GtTriplet], k: usize, mode: MatchMode) -> Option<f64> {
    if gt.is_empty() {
        return None;
    }
    let hits = match_top_k(ranked, gt, k, mode).iter().filter(|&&h| h).count();
    Some(hits as f64 / gt.len() as f64)
}

/// One image's ranked predictions paired with its ground truth.
#[derive(Clone, Debug)]
pub struct ImageEval {
    pub ranked: Vec<RankedTriplet>,
    pub gt: Vec<GtTriplet>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanRecall {
    pub value: f64,
    /// Index `p - 1` holds predicate `p`; `None` when it never occurs in ground truth.
    pub per_predicate: Vec<Option<f64>>,
}

/// Per-predicate recall of the global top-`k` lists, averaged over predicates present in ground truth.
pub fn mean_recall_at_k(images: &[ImageEval], k: usize, num_predicates: usize, mode: MatchMode, pooling: Pooling) -> MeanRecall {
    let np = num_predicates.saturating_sub(1);
    let mut sums = vec![0.0; np];
    let mut counts = vec![0usize; np];
    for img in images.iter().filter(|i| !i.gt.is_empty()) {
        let hit = match_top_k(&img.ranked, &img.gt, k, mode);
        let mut img_hits = vec![0usize; np];
        let mut img_total = vec![0usize; np];
        for (g, &h) in img.gt.iter().zip(&hit) {
            let Some(slot) = g.predicate.checked_sub(1).filter(|&s| s < np) else {
                continue;
            };
            img_total[slot] += 1;
            img_hits[slot] += h as usize;
        }
        for p in 0..np {
            if img_total[p] == 0 {
                continue;
            }
            match pooling {
                Pooling::PerImage => {
                    sums[p] += img_hits[p] as f64 / img_total[p] as f64;
                    counts[p] += 1;
                }
                Pooling::Pooled => {
                    sums[p] += img_hits[p] as f64;
                    counts[p] += img_total[p];
                }
            }
        }
    }
    let per_predicate: Vec<Option<f64>> = (0..np)
        .map(|p| (counts[p] > 0).then(|| sums[p] / counts[p] as f64))
        .collect();
    let present: Vec<f64> = per_predicate.iter().flatten().copied().collect();
    let value = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    MeanRecall { value, per_predicate }
}

/// Per-image recall samples for each predicate `1..K` (index `p - 1`): one
/// entry per image whose ground truth contains the predicate.
pub fn predicate_recall_samples(images: &[ImageEval], k: usize, num_predicates: usize, mode: MatchMode) -> Vec<Vec<f64>> {
    let np = num_predicates.saturating_sub(1);
    let mut out = vec![Vec::new(); np];
    for img in images.iter().filter(|i| !i.gt.is_empty()) {
        let hit = match_top_k(&img.ranked, &img.gt, k, mode);
        let mut hits = vec![0usize; np];
        let mut total = vec![0usize; np];
        for (g, &h) in img.gt.iter().zip(&hit) {
            if let Some(slot) = g.predicate.checked_sub(1).filter(|&s| s < np) {
                total[slot] += 1;
                hits[slot] += h as usize;
            }
        }
        for p in 0..np {
            if total[p] > 0 {
                out[p].push(hits[p] as f64 / total[p] as f64);
            }
        }
    }
    out
}

/// Macro mean over non-empty sample groups and its standard error,
/// treating groups as independent.
pub fn macro_mean_with_error(groups: &[Vec<f64>]) -> (f64, f64) {
    let mut means = Vec::new();
    let mut var_sum = 0.0;
    for g in groups.iter().filter(|g| !g.is_empty()) {
        let n = g.len() as f64;
        let mean = g.iter().sum::<f64>() / n;
        let var = if g.len() > 1 {
            g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        means.push(mean);
        var_sum += var / n;
    }
    if means.is_empty() {
        return (0.0, 0.0);
    }
    let p = means.len() as f64;
    (means.iter().sum::<f64>() / p, var_sum.sqrt() / p)
}

/// Mean of per-image recalls over images that have ground truth.
pub fn dataset_recall_at_k(images: &[ImageEval], k: usize, mode: MatchMode) -> f64 {
    let rs: Vec<f64> = images
        .iter()
        .filter_map(|i| recall_at_k(&i.ranked, &i.gt, k, mode))
        .collect();
    if rs.is_empty() {
        0.0
    } else {
        rs.iter().sum::<f64>() / rs.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub constraint: bool,
    pub ks: Vec<usize>,
    /// R@K for each entry of `ks`.
    pub recall: Vec<f64>,
    /// mR@K for each entry of `ks`.
    pub mean_recall: Vec<f64>,
    /// Per-predicate R@K table for each entry of `ks`.
    pub per_predicate: Vec<Vec<Option<f64>>>,
    /// Images with at least one ground-truth triplet.
    pub images: usize,
    /// Ground-truth occurrences of each predicate `1..K`.
    pub gt_counts: Vec<usize>,
}

impl EvalReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recall[i])
    }

    pub fn mean_recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.mean_recall[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub match_mode: MatchMode,
    pub pooling: Pooling,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            match_mode: MatchMode::Index,
            pooling: Pooling::PerImage,
        }
    }
}

/// Report for already-ranked images under one constraint mode.
pub fn report_from_images(
    task: Task,
    constraint: bool,
    images: &[ImageEval],
    ks: &[usize],
    num_predicates: usize,
    opts: EvalOptions,
) -> EvalReport {
    let np = num_predicates.saturating_sub(1);
    let mut gt_counts = vec![0; np];
    for g in images.iter().flat_map(|i| &i.gt) {
        if let Some(slot) = g.predicate.checked_sub(1).filter(|&s| s < np) {
            gt_counts[slot] += 1;
        }
    }
    let mut recall = Vec::new();
    let mut mean_recall = Vec::new();
    let mut per_predicate = Vec::new();
    for &k in ks {
        recall.push(dataset_recall_at_k(images, k, opts.match_mode));
        let mr = mean_recall_at_k(images, k, num_predicates, opts.match_mode, opts.pooling);
        mean_recall.push(mr.value);
        per_predicate.push(mr.per_predicate);
    }
    EvalReport {
        task,
        constraint,
        ks: ks.to_vec(),
        recall,
        mean_recall,
        per_predicate,
        images: images.iter().filter(|i| !i.gt.is_empty()).count(),
        gt_counts,
    }
}

/// Evaluates predictions for every dataset image under both constraint
/// modes; returns `[with constraint, without]`.
pub fn evaluate(
    dataset: &[AnnotatedImage],
    predictions: &[PredictedGraph],
    task: Task,
    ks: &[usize],
    num_predicates: usize,
    opts: EvalOptions,
) -> Result<Vec<EvalReport>> {
    if ks.contains(&0) {
        return Err(Error::Validation("K must be at least 1".into()));
    }
    let by_id: HashMap<&str, &PredictedGraph> = predictions.iter().map(|p| (p.image_id.as_str(), p)).collect();
    let missing: Vec<&str> = dataset
        .iter()
        .map(|i| i.image_id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!("no predictions for images: {}", missing.join(", "))));
    }
    let mut reports = Vec::with_capacity(2);
    for constraint in [true, false] {
        let images = dataset
            .iter()
            .map(|img| {
                Ok(ImageEval {
                    ranked: rank_triplets(by_id[img.image_id.as_str()], constraint)?,
                    gt: gt_triplets(img),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        reports.push(report_from_images(task, constraint, &images, ks, num_predicates, opts));
    }
    Ok(reports)
}

/// Human-readable summary; `per_predicate` appends the per-predicate recall table.
pub fn format_reports(reports: &[EvalReport], schema: &DatasetSchema, per_predicate: bool) -> String {
    let mut s = String::new();
    for r in reports {
        let mode = if r.constraint { "constraint" } else { "no constraint" };
        let _ = writeln!(s, "{} ({mode}), {} images", r.task, r.images);
        for (i, k) in r.ks.iter().enumerate() {
            let _ = writeln!(
                s,
                "  R@{k:<4} {:6.2}   mR@{k:<4} {:6.2}",
                100.0 * r.recall[i],
                100.0 * r.mean_recall[i]
            );
        }
        if per_predicate {
            let _ = write!(s, "  {:<24} {:>7}", "predicate", "gt");
            for k in &r.ks {
                let _ = write!(s, " {:>7}", format!("R@{k}"));
            }
            s.push('\n');
            for p in 0..r.gt_counts.len() {
                let name = schema.predicates.get(p + 1).map_or("?", String::as_str);
                let _ = write!(s, "  {name:<24} {:>7}", r.gt_counts[p]);
                for table in &r.per_predicate {
                    match table[p] {
                        Some(v) => {
                            let _ = write!(s, " {:>7.2}", 100.0 * v);
                        }
                        None => {
                            let _ = write!(s, " {:>7}", "-");
                        }
                    }
                }
                s.push('\n');
            }
        }
    }
    s
}

/// Table-style summary rows keyed by task: `(mR@50, mR@100, R@50, R@100)` with constraint.
pub fn headline(reports: &[EvalReport]) -> BTreeMap<Task, [f64; 4]> {
    reports
        .iter()
        .filter(|r| r.constraint)
        .map(|r| {
            let g = |f: fn(&EvalReport, usize) -> Option<f64>, k| f(r, k).unwrap_or(f64::NAN);
            (
                r.task,
                [
                    g(EvalReport::mean_recall_at, 50),
                    g(EvalReport::mean_recall_at, 100),
                    g(EvalReport::recall_at, 50),
                    g(EvalReport::recall_at, 100),
                ],
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relation_router::PairPrediction;

    fn graph(objects: Vec<Vec<f64>>, pairs: Vec<(usize, usize, Vec<f64>)>) -> PredictedGraph {
        PredictedGraph {
            image_id: "x".into(),
            objects,
            pairs: pairs
                .into_iter()
                .map(|(subj, obj, probs)| PairPrediction { subj, obj, probs })
                .collect(),
            boxes: None,
        }
    }

    fn gt(subj_idx: usize, obj_idx: usize, predicate: usize) -> GtTriplet {
        GtTriplet {
            subj_idx,
            obj_idx,
            predicate,
            subj_label: 0,
            obj_label: 0,
            subj_box: [0.0, 0.0, 1.0, 1.0],
            obj_box: [0.0, 0.0, 1.0, 1.0],
        }
    }

    #[test]
    fn constraint_keeps_argmax() {
        let g = graph(vec![vec![1.0], vec![1.0]], vec![(0, 1, vec![0.1, 0.6, 0.3])]);
        let r = rank_triplets(&g, true).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].predicate, 1);
        assert_eq!(r[0].score, 0.6);
        let r = rank_triplets(&g, false).unwrap();
        assert_eq!(r.iter().map(|t| t.predicate).collect::<Vec<_>>(), [1, 2]);
    }

    #[test]
    fn rank_scores_product_and_ties() {
        let g = graph(
            vec![vec![0.2, 0.8], vec![0.5, 0.5], vec![0.0, 1.0]],
            vec![(0, 1, vec![0.0, 0.5, 0.5]), (2, 1, vec![0.2, 0.4, 0.4])],
        );
        let r = rank_triplets(&g, false).unwrap();
        assert!((r[0].score - 0.2).abs() < 1e-15 && r[0].subj_idx == 0 && r[0].predicate == 1);
        assert!((r[1].score - 0.2).abs() < 1e-15 && r[1].subj_idx == 0 && r[1].predicate == 2);
        assert_eq!(r[0].obj_label, 0);
        assert_eq!(r[2].subj_idx, 2);
    }

    #[test]
    fn invalid_probabilities_rejected() {
        let g = graph(vec![vec![1.0], vec![1.0]], vec![(0, 1, vec![-0.1, 1.1])]);
        assert!(matches!(rank_triplets(&g, true), Err(Error::Validation(_))));
        let g = graph(vec![vec![1.0], vec![1.0]], vec![(0, 3, vec![0.5, 0.5])]);
        assert!(rank_triplets(&g, true).is_err());
    }

    #[test]
    fn recall_cases() {
        let g = graph(
            vec![vec![1.0], vec![1.0], vec![1.0]],
            vec![(0, 1, vec![0.0, 0.9, 0.1]), (1, 2, vec![0.0, 0.2, 0.8])],
        );
        let ranked = rank_triplets(&g, true).unwrap();
        let truth = [gt(0, 1, 1), gt(1, 2, 1)];
        assert_eq!(recall_at_k(&ranked, &truth, 1, MatchMode::Index), Some(0.5));
        assert_eq!(recall_at_k(&ranked, &truth, 5, MatchMode::Index), Some(0.5));
        let truth2 = [gt(0, 1, 1), gt(1, 2, 2)];
        assert_eq!(recall_at_k(&ranked, &truth2, 100, MatchMode::Index), Some(1.0));
        assert_eq!(recall_at_k(&[], &truth2, 100, MatchMode::Index), Some(0.0));
        assert_eq!(recall_at_k(&ranked, &[], 100, MatchMode::Index), None);
    }

    #[test]
    fn iou_mode_matches_shifted_boxes_once() {
        let mut g = graph(vec![vec![1.0], vec![1.0], vec![1.0]], vec![(0, 1, vec![0.0, 1.0]), (2, 1, vec![0.0, 1.0])]);
        g.boxes = Some(vec![[0.0, 0.0, 10.0, 10.0], [20.0, 0.0, 30.0, 10.0], [0.0, 0.0, 10.0, 9.0]]);
        let ranked = rank_triplets(&g, true).unwrap();
        let mut t = gt(5, 6, 1);
        t.subj_box = [0.0, 0.0, 10.0, 10.0];
        t.obj_box = [21.0, 0.0, 30.0, 10.0];
        let hits = match_top_k(&ranked, &[t.clone()], 10, MatchMode::Iou(0.5));
        assert_eq!(hits, vec![true]);
        // both predictions overlap the single GT; it is counted once
        assert_eq!(recall_at_k(&ranked, &[t.clone()], 10, MatchMode::Iou(0.5)), Some(1.0));
        assert_eq!(recall_at_k(&ranked, &[t], 10, MatchMode::Index), Some(0.0));
    }

    #[test]
    fn mean_recall_single_class_and_perfect_one_of_five() {
        let ranked: Vec<RankedTriplet> = (0..5)
            .map(|p| RankedTriplet {
                subj_idx: p,
                obj_idx: p + 1,
                predicate: 1,
                score: 1.0,
                subj_label: 0,
                obj_label: 0,
                subj_box: None,
                obj_box: None,
            })
            .collect();
        let truth: Vec<GtTriplet> = (0..5).map(|p| gt(p, p + 1, p + 1)).collect();
        let imgs = [ImageEval { ranked: ranked.clone(), gt: truth }];
        let mr = mean_recall_at_k(&imgs, 50, 6, MatchMode::Index, Pooling::PerImage);
        assert!((mr.value - 0.2).abs() < 1e-15);
        assert_eq!(mr.per_predicate[0], Some(1.0));
        assert_eq!(mr.per_predicate[4], Some(0.0));

        let single = [ImageEval { ranked, gt: vec![gt(0, 1, 1), gt(3, 2, 1)] }];
        let mr = mean_recall_at_k(&single, 50, 6, MatchMode::Index, Pooling::PerImage);
        assert_eq!(mr.value, dataset_recall_at_k(&single, 50, MatchMode::Index));
        assert_eq!(mr.per_predicate[1], None);
    }

    #[test]
    fn truncation_can_favour_the_constraint() {
        // pair (0,1) has a clear best predicate; pair (1,0) splits its mass
        // over two predicates that both outrank it once unconstrained
        let g = graph(
            vec![vec![1.0], vec![1.0]],
            vec![(0, 1, vec![0.0, 0.4, 0.3, 0.3]), (1, 0, vec![0.1, 0.45, 0.45, 0.0])],
        );
        let truth = [gt(0, 1, 1)];
        let with = rank_triplets(&g, true).unwrap();
        let without = rank_triplets(&g, false).unwrap();
        assert_eq!(recall_at_k(&with, &truth, 2, MatchMode::Index), Some(1.0));
        assert_eq!(recall_at_k(&without, &truth, 2, MatchMode::Index), Some(0.0));
    }
}
