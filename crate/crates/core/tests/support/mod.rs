//! Random evaluation instances and an exhaustive matching oracle.

#![allow(dead_code)]

use kern_core::dataset::{AnnotatedImage, Region, Triplet};
use kern_core::metrics::{GtTriplet, RankedTriplet};
use kern_core::relation_router::{PairPrediction, PredictedGraph};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn distribution(rng: &mut ChaCha8Rng, n: usize, peaked: bool) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(if peaked { 3 } else { 1 })).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Image with at most `max_regions` regions over `categories` labels and
/// predicates `1..predicates`, plus a prediction over every ordered pair.
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    id: usize,
    max_regions: usize,
    categories: usize,
    predicates: usize,
) -> (AnnotatedImage, PredictedGraph) {
    let n = rng.random_range(2..=max_regions);
    let regions: Vec<Region> = (0..n)
        .map(|i| Region {
            bbox: [i as f64, 0.0, i as f64 + 5.0, 5.0],
            label: rng.random_range(0..categories),
            feature: vec![],
        })
        .collect();
    let mut triplets = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.random_bool(0.4) {
                triplets.push(Triplet {
                    subj: i,
                    obj: j,
                    predicate: rng.random_range(1..predicates),
                });
            }
        }
    }
    let image = AnnotatedImage {
        image_id: format!("r{id}"),
        width: 100,
        height: 100,
        regions,
        triplets,
    };
    let objects = (0..n)
        .map(|i| {
            if rng.random_bool(0.5) {
                let mut p = vec![0.0; categories];
                p[image.regions[i].label] = 1.0;
                p
            } else {
                distribution(rng, categories, true)
            }
        })
        .collect();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.random_bool(0.9) {
                pairs.push(PairPrediction {
                    subj: i,
                    obj: j,
                    probs: distribution(rng, predicates, true),
                });
            }
        }
    }
    let pred = PredictedGraph {
        image_id: image.image_id.clone(),
        objects,
        pairs,
        boxes: None,
    };
    (image, pred)
}

fn compatible(p: &RankedTriplet, g: &GtTriplet) -> bool {
    p.subj_idx == g.subj_idx
        && p.obj_idx == g.obj_idx
        && p.predicate == g.predicate
        && p.subj_label == g.subj_label
        && p.obj_label == g.obj_label
}

/// Hit flags of a maximum one-to-one matching between the top `k`
/// predictions and the ground truth, found by trying every assignment.
pub fn brute_force_hits(ranked: &[RankedTriplet], gt: &[GtTriplet], k: usize) -> Vec<bool> {
    fn go(g: usize, top: &[RankedTriplet], gt: &[GtTriplet], used: &mut Vec<bool>, cur: &mut Vec<bool>, best: &mut Vec<bool>) {
        if g == gt.len() {
            if cur.iter().filter(|h| **h).count() > best.iter().filter(|h| **h).count() {
                *best = cur.clone();
            }
            return;
        }
        go(g + 1, top, gt, used, cur, best);
        for p in 0..top.len() {
            if !used[p] && compatible(&top[p], &gt[g]) {
                used[p] = true;
                cur[g] = true;
                go(g + 1, top, gt, used, cur, best);
                cur[g] = false;
                used[p] = false;
            }
        }
    }
    let top = &ranked[..k.min(ranked.len())];
    let mut best = vec![false; gt.len()];
    go(0, top, gt, &mut vec![false; top.len()], &mut vec![false; gt.len()], &mut best);
    best
}

pub fn oracle_recall(ranked: &[RankedTriplet], gt: &[GtTriplet], k: usize) -> Option<f64> {
    if gt.is_empty() {
        return None;
    }
    let hits = brute_force_hits(ranked, gt, k).iter().filter(|h| **h).count();
    Some(hits as f64 / gt.len() as f64)
}

/// Macro mR@k from the exhaustive matching.
pub fn oracle_mean_recall(images: &[(Vec<RankedTriplet>, Vec<GtTriplet>)], k: usize, predicates: usize) -> f64 {
    let mut per: Vec<Vec<f64>> = vec![Vec::new(); predicates];
    for (ranked, gt) in images {
        let hits = brute_force_hits(ranked, gt, k);
        for p in 1..predicates {
            let idx: Vec<usize> = (0..gt.len()).filter(|&g| gt[g].predicate == p).collect();
            if !idx.is_empty() {
                per[p].push(idx.iter().filter(|&&g| hits[g]).count() as f64 / idx.len() as f64);
            }
        }
    }
    let means: Vec<f64> = per
        .iter()
        .filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .collect();
    if means.is_empty() {
        0.0
    } else {
        means.iter().sum::<f64>() / means.len() as f64
    }
}
