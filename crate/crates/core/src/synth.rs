//! Synthetic scene graphs with a known generating process.
//!
//! Categories follow a Zipf marginal, later objects in an image are drawn
//! from a co-occurrence conditional of an earlier one, features are class
//! prototypes plus Gaussian noise, and each ordered pair is annotated with
//! fixed probability using a predicate drawn from a skewed per-pair
//! distribution. The stored process gives the exact prior that counting
//! should recover.

use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{AnnotatedImage, DatasetSchema, Region, Triplet};
use crate::error::{Error, Result};
use crate::metrics::macro_mean_with_error;
use crate::object_router::argmax;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_categories: usize,
    /// Including the no-relationship class.
    pub num_predicates: usize,
    pub feature_dim: usize,
    pub images: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Exponent `s` of the category marginal `∝ 1/(c+1)^s`.
    pub category_zipf: f64,
    /// Sharpening exponent applied to each Dirichlet predicate draw; `inf` gives one-hot fibers.
    pub predicate_temperature: f64,
    pub predicate_concentration: f64,
    /// Probability that a later object follows the co-occurrence conditional rather than the marginal.
    pub cooccurrence_mixing: f64,
    pub cooccurrence_concentration: f64,
    pub feature_noise: f64,
    pub annotated_fraction: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_categories: 20,
            num_predicates: 11,
            feature_dim: 16,
            images: 1000,
            min_objects: 3,
            max_objects: 6,
            category_zipf: 1.0,
            predicate_temperature: 3.0,
            predicate_concentration: 1.0,
            cooccurrence_mixing: 0.7,
            cooccurrence_concentration: 0.3,
            feature_noise: 1.0,
            annotated_fraction: 0.3,
            image_width: 640,
            image_height: 480,
            seed: 0,
        }
    }
}

const MIN_BOX_SIDE: u32 = 8;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Validation(format!("synth config: {what}")));
        if self.num_categories == 0 || self.num_predicates < 2 || self.feature_dim == 0 {
            return bad("need C ≥ 1, K ≥ 2 and d_f ≥ 1");
        }
        if self.min_objects == 0 || self.max_objects < self.min_objects {
            return bad("object range must satisfy 1 ≤ min ≤ max");
        }
        if !(self.category_zipf >= 0.0 && self.category_zipf.is_finite()) {
            return bad("category_zipf must be finite and non-negative");
        }
        if !(self.predicate_temperature > 0.0) {
            return bad("predicate_temperature must be positive");
        }
        if !(self.predicate_concentration > 0.0 && self.cooccurrence_concentration > 0.0) {
            return bad("concentrations must be positive");
        }
        if !(0.0..=1.0).contains(&self.cooccurrence_mixing) || !(0.0..=1.0).contains(&self.annotated_fraction) {
            return bad("mixing weight and annotated fraction must be in [0, 1]");
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return bad("feature_noise must be finite and non-negative");
        }
        if self.image_width < 2 * MIN_BOX_SIDE || self.image_height < 2 * MIN_BOX_SIDE {
            return bad("image too small");
        }
        Ok(())
    }

    pub fn schema(&self) -> DatasetSchema {
        DatasetSchema::synthetic(self.num_categories, self.num_predicates)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthProcess {
    pub num_categories: usize,
    pub num_predicates: usize,
    pub feature_dim: usize,
    pub category_marginal: Vec<f64>,
    /// `C × C`; row `c` is the distribution of an object drawn next to a `c`.
    pub cooccurrence: Vec<f64>,
    /// `C × C × K`; `[s][o][0]` is the unannotated share, the rest the annotated predicate split.
    pub predicate_prior: Vec<f64>,
    /// `C × d_f`.
    pub prototypes: Vec<f64>,
}

impl GroundTruthProcess {
    pub fn fiber(&self, subj: usize, obj: usize) -> &[f64] {
        let k = self.num_predicates;
        let start = (subj * self.num_categories + obj) * k;
        &self.predicate_prior[start..start + k]
    }

    /// Most likely annotated predicate of a category pair (ties to the lowest index).
    pub fn best_predicate(&self, subj: usize, obj: usize) -> usize {
        1 + argmax(&self.fiber(subj, obj)[1..])
    }

    pub fn prototype(&self, c: usize) -> &[f64] {
        &self.prototypes[c * self.feature_dim..(c + 1) * self.feature_dim]
    }

    pub fn check_invariants(&self) -> Result<()> {
        let ok = |xs: &[f64]| (xs.iter().sum::<f64>() - 1.0).abs() <= 1e-9 && xs.iter().all(|v| *v >= 0.0);
        let (c, k) = (self.num_categories, self.num_predicates);
        if self.category_marginal.len() != c || self.cooccurrence.len() != c * c || self.predicate_prior.len() != c * c * k {
            return Err(Error::Validation("process tables have the wrong size".into()));
        }
        if self.prototypes.len() != c * self.feature_dim {
            return Err(Error::Validation("prototype table has the wrong size".into()));
        }
        if !ok(&self.category_marginal) || !self.cooccurrence.chunks(c).all(ok) || !self.predicate_prior.chunks(k).all(ok) {
            return Err(Error::Validation("process distribution not normalised".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("process serializes");
        crate::tensor::write_atomic(path, (text + "\n").as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let p: GroundTruthProcess = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        p.check_invariants()?;
        Ok(p)
    }
}

fn dirichlet(rng: &mut ChaCha8Rng, alpha: f64, n: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive concentration");
    loop {
        let mut v: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let s: f64 = v.iter().sum();
        if s > 0.0 && s.is_finite() {
            v.iter_mut().for_each(|x| *x /= s);
            return v;
        }
    }
}

/// `q^τ` renormalised, computed in log space.
fn sharpen(q: &[f64], tau: f64) -> Vec<f64> {
    if tau.is_infinite() {
        let mut out = vec![0.0; q.len()];
        out[argmax(q)] = 1.0;
        return out;
    }
    let logs: Vec<f64> = q.iter().map(|v| tau * v.max(f64::MIN_POSITIVE).ln()).collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

fn normalise(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
}

pub fn build_process(cfg: &SynthConfig) -> Result<GroundTruthProcess> {
    cfg.validate()?;
    let (c, k, d) = (cfg.num_categories, cfg.num_predicates, cfg.feature_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut category_marginal: Vec<f64> = (0..c).map(|i| ((i + 1) as f64).powf(-cfg.category_zipf)).collect();
    normalise(&mut category_marginal);
    let prototypes: Vec<f64> = (0..c * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut cooccurrence = Vec::with_capacity(c * c);
    for _ in 0..c {
        cooccurrence.extend(dirichlet(&mut rng, cfg.cooccurrence_concentration, c));
    }
    let mut predicate_prior = Vec::with_capacity(c * c * k);
    for _ in 0..c * c {
        let q = sharpen(&dirichlet(&mut rng, cfg.predicate_concentration, k - 1), cfg.predicate_temperature);
        predicate_prior.push(1.0 - cfg.annotated_fraction);
        predicate_prior.extend(q.iter().map(|v| cfg.annotated_fraction * v));
    }
    let process = GroundTruthProcess {
        num_categories: c,
        num_predicates: k,
        feature_dim: d,
        category_marginal,
        cooccurrence,
        predicate_prior,
        prototypes,
    };
    process.check_invariants()?;
    Ok(process)
}

/// Labels and triplets of one image, without geometry or features.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub labels: Vec<usize>,
    pub triplets: Vec<Triplet>,
}

/// Samplers built once per process.
struct Samplers {
    marginal: WeightedIndex<f64>,
    conditional: Vec<WeightedIndex<f64>>,
    predicates: Vec<Option<WeightedIndex<f64>>>,
}

impl Samplers {
    fn new(p: &GroundTruthProcess) -> Result<Self> {
        let weighted = |w: &[f64]| WeightedIndex::new(w.iter().copied()).map_err(|e| Error::Validation(e.to_string()));
        let c = p.num_categories;
        Ok(Samplers {
            marginal: weighted(&p.category_marginal)?,
            conditional: p.cooccurrence.chunks(c).map(weighted).collect::<Result<_>>()?,
            predicates: p
                .predicate_prior
                .chunks(p.num_predicates)
                .map(|f| weighted(&f[1..]).ok())
                .collect(),
        })
    }
}

fn sample_scene_with(p: &GroundTruthProcess, s: &Samplers, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Scene {
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut labels = Vec::with_capacity(n);
    labels.push(s.marginal.sample(rng));
    while labels.len() < n {
        let anchor = labels[rng.random_range(0..labels.len())];
        let next = if rng.random::<f64>() < cfg.cooccurrence_mixing {
            s.conditional[anchor].sample(rng)
        } else {
            s.marginal.sample(rng)
        };
        labels.push(next);
    }
    let mut triplets = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j || rng.random::<f64>() >= cfg.annotated_fraction {
                continue;
            }
            let idx = labels[i] * p.num_categories + labels[j];
            if let Some(w) = &s.predicates[idx] {
                triplets.push(Triplet {
                    subj: i,
                    obj: j,
                    predicate: 1 + w.sample(rng),
                });
            }
        }
    }
    Scene { labels, triplets }
}

fn image_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng
}

fn sample_box(rng: &mut ChaCha8Rng, width: u32, height: u32) -> [f64; 4] {
    let x1 = rng.random_range(0..=width - MIN_BOX_SIDE);
    let x2 = rng.random_range(x1 + MIN_BOX_SIDE..=width);
    let y1 = rng.random_range(0..=height - MIN_BOX_SIDE);
    let y2 = rng.random_range(y1 + MIN_BOX_SIDE..=height);
    [x1 as f64, y1 as f64, x2 as f64, y2 as f64]
}

/// Images `start..start + count`; each image has its own seed stream so the
/// output does not depend on how the range is split or parallelised.
pub fn generate_range(process: &GroundTruthProcess, cfg: &SynthConfig, start: usize, count: usize) -> Result<Vec<AnnotatedImage>> {
    cfg.validate()?;
    if process.num_categories != cfg.num_categories
        || process.num_predicates != cfg.num_predicates
        || process.feature_dim != cfg.feature_dim
    {
        return Err(Error::Validation("process and config disagree on C, K or d_f".into()));
    }
    let samplers = Samplers::new(process)?;
    Ok((start..start + count)
        .into_par_iter()
        .map(|idx| {
            let mut rng = image_rng(cfg.seed, idx as u64);
            let scene = sample_scene_with(process, &samplers, cfg, &mut rng);
            let regions = scene
                .labels
                .iter()
                .map(|&label| {
                    let bbox = sample_box(&mut rng, cfg.image_width, cfg.image_height);
                    let feature = process
                        .prototype(label)
                        .iter()
                        .map(|m| m + cfg.feature_noise * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    Region { bbox, label, feature }
                })
                .collect();
            AnnotatedImage {
                image_id: format!("img{idx:07}"),
                width: cfg.image_width,
                height: cfg.image_height,
                regions,
                triplets: scene.triplets,
            }
        })
        .collect())
}

pub fn generate(process: &GroundTruthProcess, cfg: &SynthConfig) -> Result<Vec<AnnotatedImage>> {
    generate_range(process, cfg, 0, cfg.images)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreqOracle {
    pub mean_recall: f64,
    pub std_error: f64,
    pub samples: usize,
    /// Index `p - 1`; `None` when predicate `p` never appeared.
    pub per_predicate: Vec<Option<f64>>,
}

/// Monte Carlo estimate of the FREQ baseline's PredCls mR@`k_eval` with the
/// graph constraint. FREQ hits a triplet iff its predicate is the most
/// likely annotated predicate of the category pair; this holds whenever
/// every pair of an image fits in the top `k_eval`, which is required.
pub fn analytic_freq_mr(process: &GroundTruthProcess, cfg: &SynthConfig, k_eval: usize, samples: usize, seed: u64) -> Result<FreqOracle> {
    cfg.validate()?;
    let max_pairs = cfg.max_objects * (cfg.max_objects - 1);
    if max_pairs > k_eval {
        return Err(Error::Validation(format!(
            "oracle needs every pair in the top {k_eval}, but images may have {max_pairs} pairs"
        )));
    }
    if samples == 0 {
        return Err(Error::Validation("oracle needs at least one sample".into()));
    }
    let samplers = Samplers::new(process)?;
    let np = process.num_predicates - 1;
    let per_image: Vec<Vec<(usize, f64)>> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = image_rng(seed, i as u64);
            let scene = sample_scene_with(process, &samplers, cfg, &mut rng);
            let mut hits = vec![0usize; np];
            let mut total = vec![0usize; np];
            for t in &scene.triplets {
                let p = t.predicate - 1;
                total[p] += 1;
                if process.best_predicate(scene.labels[t.subj], scene.labels[t.obj]) == t.predicate {
                    hits[p] += 1;
                }
            }
            (0..np)
                .filter(|&p| total[p] > 0)
                .map(|p| (p, hits[p] as f64 / total[p] as f64))
                .collect()
        })
        .collect();
    let mut groups = vec![Vec::new(); np];
    for (p, r) in per_image.into_iter().flatten() {
        groups[p].push(r);
    }
    let (mean_recall, std_error) = macro_mean_with_error(&groups);
    Ok(FreqOracle {
        mean_recall,
        std_error,
        samples,
        per_predicate: groups
            .iter()
            .map(|g| (!g.is_empty()).then(|| g.iter().sum::<f64>() / g.len() as f64))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            num_categories: 4,
            num_predicates: 4,
            feature_dim: 3,
            images: 50,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn process_normalised_and_deterministic() {
        let a = build_process(&small()).unwrap();
        let b = build_process(&small()).unwrap();
        assert_eq!(a, b);
        a.check_invariants().unwrap();
        for s in 0..4 {
            for o in 0..4 {
                assert!((a.fiber(s, o)[0] - 0.7).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn infinite_temperature_is_one_hot() {
        let cfg = SynthConfig {
            predicate_temperature: f64::INFINITY,
            annotated_fraction: 1.0,
            ..small()
        };
        let p = build_process(&cfg).unwrap();
        for f in p.predicate_prior.chunks(4) {
            assert_eq!(f[0], 0.0);
            assert_eq!(f[1..].iter().filter(|v| **v == 1.0).count(), 1);
        }
    }

    #[test]
    fn sharpen_limits() {
        let q = [0.2, 0.5, 0.3];
        assert!(sharpen(&q, 1.0).iter().zip(q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) < 1e-15);
        let s = sharpen(&q, 200.0);
        assert!(s[1] > 1.0 - 1e-12);
    }

    #[test]
    fn noiseless_features_equal_prototypes() {
        let cfg = SynthConfig {
            feature_noise: 0.0,
            ..small()
        };
        let p = build_process(&cfg).unwrap();
        for img in generate(&p, &cfg).unwrap() {
            img.validate(&cfg.schema()).unwrap();
            for r in &img.regions {
                assert_eq!(r.feature.as_slice(), p.prototype(r.label));
            }
        }
    }

    #[test]
    fn zero_fraction_has_no_triplets() {
        let cfg = SynthConfig {
            annotated_fraction: 0.0,
            ..small()
        };
        let p = build_process(&cfg).unwrap();
        assert!(generate(&p, &cfg).unwrap().iter().all(|i| i.triplets.is_empty()));
    }

    #[test]
    fn ranges_compose() {
        let cfg = small();
        let p = build_process(&cfg).unwrap();
        let all = generate_range(&p, &cfg, 0, 10).unwrap();
        let tail = generate_range(&p, &cfg, 4, 6).unwrap();
        assert_eq!(&all[4..], &tail[..]);
    }

    #[test]
    fn oracle_limits() {
        let cfg = SynthConfig {
            predicate_temperature: f64::INFINITY,
            ..small()
        };
        let p = build_process(&cfg).unwrap();
        let o = analytic_freq_mr(&p, &cfg, 50, 2000, 1).unwrap();
        assert_eq!(o.mean_recall, 1.0);
        assert_eq!(o.std_error, 0.0);
        assert!(analytic_freq_mr(&p, &cfg, 10, 10, 1).is_err());
    }
}
