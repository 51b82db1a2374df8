//! Joint training of both routers with Adam.
//!
//! Each image contributes `w_o·CE(objects) + w_r·CE(sampled pairs)`, with the
//! prior indexed by the annotated labels. Per-image gradients may be computed
//! on worker threads; they are summed in batch order so results do not depend
//! on the thread count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dataset::{AnnotatedImage, Triplet};
use crate::error::{Error, Result};
use crate::knowledge::KnowledgeBase;
use crate::metrics::{evaluate, EvalOptions};
use crate::model::{Model, ModelSpec, Task};
use crate::object_router::{argmax, object_logits, ObjectGraph, ObjectRouterVars};
use crate::relation_router::{predict_graph, relation_logits, PairInput, PredictedGraph, RelationRouterVars};
use crate::tensor::{init_rng, write_atomic, ParameterSet};

pub type GradMap = BTreeMap<String, Vec<f64>>;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const MODEL_SPEC: &str = "model.json";
pub const TRAIN_LOG: &str = "train_log.tsv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Images per optimizer step.
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    /// Unannotated pairs sampled per annotated pair.
    pub negative_ratio: f64,
    /// The learning rate is divided by this after `patience` epochs without improvement.
    pub lr_decay: f64,
    pub patience: usize,
    pub object_loss_weight: f64,
    pub relation_loss_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 10,
            negative_ratio: 3.0,
            lr_decay: 10.0,
            patience: 2,
            object_loss_weight: 1.0,
            relation_loss_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Validation(format!("train config: {what}")));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.patience == 0 {
            return bad("batch_size, epochs and patience must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("adam moments must be in [0, 1) and epsilon positive");
        }
        if !(self.negative_ratio >= 0.0 && self.negative_ratio.is_finite()) {
            return bad("negative_ratio must be finite and non-negative");
        }
        if !(self.lr_decay >= 1.0) {
            return bad("lr_decay must be at least 1");
        }
        if !(self.object_loss_weight >= 0.0 && self.relation_loss_weight >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first: GradMap,
    pub second: GradMap,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParameterSet) -> Self {
        let zeros: GradMap = params
            .iter()
            .map(|(n, t)| (n.clone(), vec![0.0; t.numel()]))
            .collect();
        OptimizerState {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }
}

/// Bias-corrected Adam update at learning rate `lr`. Parameters absent from
/// `grads` see a zero gradient.
pub fn adam_step(params: &mut ParameterSet, grads: &GradMap, state: &mut OptimizerState, cfg: &TrainConfig, lr: f64) -> Result<()> {
    for (name, g) in grads {
        let t = params.get(name)?;
        if g.len() != t.numel() {
            return Err(Error::dim("adam_step", t.shape(), &[g.len()]));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient for parameter {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name);
        let m = state
            .first
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("optimizer has no state for {name}")))?;
        let v = state.second.get_mut(name).expect("moments share keys");
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g[i]);
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Mean softmax cross-entropy of `n × C` logits against region labels.
pub fn object_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// Mean softmax cross-entropy of `P × K` logits against predicates (0 = no relationship).
pub fn relation_loss(tape: &mut Tape, logits: Var, predicates: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, predicates)
}

/// Annotated pairs among the first `n` regions, followed by
/// `round(ratio·#positives)` unannotated ordered pairs drawn without
/// replacement and labelled 0. An image without positives gets
/// `max(1, ⌈ratio⌉)` negatives when `ratio > 0`.
pub fn sample_pairs(image: &AnnotatedImage, n: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Vec<Triplet> {
    let mut out: Vec<Triplet> = image
        .triplets
        .iter()
        .filter(|t| t.subj < n && t.obj < n)
        .cloned()
        .collect();
    if ratio <= 0.0 {
        return out;
    }
    let annotated: std::collections::HashSet<(usize, usize)> = out.iter().map(|t| (t.subj, t.obj)).collect();
    let candidates: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j && !annotated.contains(&(i, j)))
        .collect();
    let wanted = if out.is_empty() {
        (ratio.ceil() as usize).max(1)
    } else {
        (ratio * out.len() as f64).round() as usize
    };
    let take = wanted.min(candidates.len());
    for idx in sample(rng, candidates.len(), take).into_iter() {
        let (subj, obj) = candidates[idx];
        out.push(Triplet { subj, obj, predicate: 0 });
    }
    out
}

/// Joint loss of one image with the prior indexed by annotated labels.
/// Returns `None` for an image without regions.
pub fn joint_loss(
    tape: &mut Tape,
    model: &Model,
    kb: &KnowledgeBase,
    image: &AnnotatedImage,
    pairs: &[Triplet],
    cfg: &TrainConfig,
) -> Result<Option<Var>> {
    let spec = &model.spec;
    let n = model.region_count(image);
    if n == 0 {
        return Ok(None);
    }
    let labels: Vec<usize> = image.regions[..n].iter().map(|r| r.label).collect();
    let features = model.feature_matrix(image, n)?;
    let obj_vars = ObjectRouterVars::load(tape, &model.params)?;
    let graph = ObjectGraph::new(n, kb.cooccurrence(), spec.num_categories)?;
    let logits = object_logits(tape, &obj_vars, &features, &graph, spec.config.object_steps)?;
    let lo = object_loss(tape, logits, &labels)?;
    let mut loss = tape.scale(lo, cfg.object_loss_weight)?;

    if !pairs.is_empty() {
        let inputs = pairs
            .iter()
            .map(|t| PairInput::from_image(image, t.subj, t.obj, &labels))
            .collect::<Result<Vec<_>>>()?;
        let targets: Vec<usize> = pairs.iter().map(|t| t.predicate).collect();
        let rel_vars = RelationRouterVars::load(tape, &model.params)?;
        let logits = relation_logits(tape, &rel_vars, &inputs, kb, spec.config.relation_steps)?;
        let lr = relation_loss(tape, logits, &targets)?;
        let lr = tape.scale(lr, cfg.relation_loss_weight)?;
        loss = tape.add(loss, lr)?;
    }
    Ok(Some(loss))
}

/// Loss value and parameter gradients of one image.
pub fn image_gradients(
    model: &Model,
    kb: &KnowledgeBase,
    image: &AnnotatedImage,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(f64, GradMap)>> {
    let pairs = sample_pairs(image, model.region_count(image), cfg.negative_ratio, rng);
    let mut tape = Tape::new();
    let Some(loss) = joint_loss(&mut tape, model, kb, image, &pairs, cfg)? else {
        return Ok(None);
    };
    let value = tape.value(loss).data()[0];
    Ok(Some((value, tape.param_gradients(loss)?)))
}

/// One optimizer step on a batch; returns the mean image loss. Gradients are
/// averaged over images that have regions.
pub fn train_step(
    model: &mut Model,
    kb: &KnowledgeBase,
    batch: &[&AnnotatedImage],
    seeds: &[u64],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<f64> {
    let results = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(img, &seed)| image_gradients(model, kb, img, cfg, &mut ChaCha8Rng::seed_from_u64(seed)))
        .collect::<Result<Vec<_>>>()?;
    let mut total = GradMap::new();
    let mut loss = 0.0;
    let mut count = 0usize;
    for (l, grads) in results.into_iter().flatten() {
        loss += l;
        count += 1;
        for (name, g) in grads {
            match total.get_mut(&name) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                None => {
                    total.insert(name, g);
                }
            }
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    let inv = 1.0 / count as f64;
    total.values_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= inv));
    adam_step(&mut model.params, &total, state, cfg, lr)?;
    Ok(loss * inv)
}

/// Predictions for every image, in input order.
pub fn predict_dataset(model: &Model, kb: &KnowledgeBase, images: &[AnnotatedImage], task: Task) -> Result<Vec<PredictedGraph>> {
    images.par_iter().map(|img| predict_graph(img, kb, model, task)).collect()
}

/// PredCls mR@50 with the graph constraint.
pub fn validation_score(model: &Model, kb: &KnowledgeBase, images: &[AnnotatedImage]) -> Result<f64> {
    let preds = predict_dataset(model, kb, images, Task::PredCls)?;
    let reports = evaluate(images, &preds, Task::PredCls, &[50], model.spec.num_predicates, EvalOptions::default())?;
    Ok(reports[0].mean_recall[0])
}

/// Fraction of (truncated) regions whose SGCls argmax equals the annotation.
pub fn object_accuracy(model: &Model, kb: &KnowledgeBase, images: &[AnnotatedImage]) -> Result<f64> {
    let counts = images
        .par_iter()
        .map(|img| -> Result<(usize, usize)> {
            let n = model.region_count(img);
            if n == 0 {
                return Ok((0, 0));
            }
            let mut tape = Tape::new();
            let vars = ObjectRouterVars::load(&mut tape, &model.params)?;
            let graph = ObjectGraph::new(n, kb.cooccurrence(), model.spec.num_categories)?;
            let logits = object_logits(&mut tape, &vars, &model.feature_matrix(img, n)?, &graph, model.spec.config.object_steps)?;
            let t = tape.value(logits);
            let hits = (0..n).filter(|&i| argmax(t.row(i)) == img.regions[i].label).count();
            Ok((hits, n))
        })
        .collect::<Result<Vec<_>>>()?;
    let (hits, total) = counts.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_mean_recall_50: f64,
    pub learning_rate: f64,
}

pub fn format_log(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch\tloss\tval_mR@50\tlr\n");
    for e in log {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", e.epoch, e.loss, e.val_mean_recall_50, e.learning_rate);
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation score.
    pub best: Model,
    pub last: Model,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Trains from a fresh initialisation. When `out_dir` is given the model
/// spec, best and last checkpoints and the epoch log are written there
/// (atomically) after every epoch.
pub fn train(
    train_set: &[AnnotatedImage],
    val_set: &[AnnotatedImage],
    kb: &KnowledgeBase,
    spec: ModelSpec,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Validation("training needs non-empty train and validation splits".into()));
    }
    if kb.num_categories() != spec.num_categories || kb.num_predicates() != spec.num_predicates {
        return Err(Error::Validation("knowledge base and model disagree on C or K".into()));
    }
    let mut model = Model::new(spec, cfg.seed)?;
    let mut state = OptimizerState::new(&model.params);
    let mut rng = init_rng(cfg.seed.wrapping_add(1));
    let mut lr = cfg.learning_rate;
    let mut best: Option<(f64, usize, ParameterSet)> = None;
    let mut stale = 0;
    let mut log = Vec::with_capacity(cfg.epochs);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        spec.save(&dir.join(MODEL_SPEC))?;
    }

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&AnnotatedImage> = chunk.iter().map(|&i| &train_set[i]).collect();
            let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
            let loss = train_step(&mut model, kb, &batch, &seeds, &mut state, cfg, lr).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("epoch {epoch} step {}: {m}", step + 1)),
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("epoch {epoch} step {}: loss is {loss}", step + 1)));
            }
            loss_sum += loss;
            steps += 1;
        }
        let score = validation_score(&model, kb, val_set)?;
        log.push(EpochLog {
            epoch,
            loss: loss_sum / steps.max(1) as f64,
            val_mean_recall_50: score,
            learning_rate: lr,
        });
        let improved = best.as_ref().is_none_or(|(b, _, _)| score > *b);
        if improved {
            best = Some((score, epoch, model.params.clone()));
            stale = 0;
            if let Some(dir) = out_dir {
                model.params.save(&dir.join(BEST_CHECKPOINT))?;
            }
        } else {
            stale += 1;
            if stale >= cfg.patience {
                lr /= cfg.lr_decay;
                stale = 0;
            }
        }
        if let Some(dir) = out_dir {
            model.params.save(&dir.join(LAST_CHECKPOINT))?;
            write_atomic(&dir.join(TRAIN_LOG), format_log(&log).as_bytes())?;
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best: Model { spec, params },
        last: model,
        best_epoch,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Region;
    use crate::tensor::Tensor;

    fn image(n: usize, triplets: Vec<Triplet>) -> AnnotatedImage {
        AnnotatedImage {
            image_id: "t".into(),
            width: 100,
            height: 100,
            regions: (0..n)
                .map(|i| Region {
                    bbox: [i as f64, 0.0, i as f64 + 10.0, 10.0],
                    label: 0,
                    feature: vec![0.0],
                })
                .collect(),
            triplets,
        }
    }

    fn t(subj: usize, obj: usize, predicate: usize) -> Triplet {
        Triplet { subj, obj, predicate }
    }

    #[test]
    fn negative_counts() {
        let mut rng = init_rng(1);
        // 4 regions: 12 ordered pairs, 2 annotated, 10 candidates
        let img = image(4, vec![t(0, 1, 1), t(2, 3, 1)]);
        let s = sample_pairs(&img, 4, 3.0, &mut rng);
        assert_eq!(s.len(), 8);
        assert_eq!(s.iter().filter(|p| p.predicate == 0).count(), 6);
        let s = sample_pairs(&img, 4, 0.0, &mut rng);
        assert_eq!(s.len(), 2);
        let s = sample_pairs(&img, 4, 100.0, &mut rng);
        assert_eq!(s.len(), 12);
        let mut uniq: Vec<_> = s.iter().map(|p| (p.subj, p.obj)).collect();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 12);

        let empty = image(3, vec![]);
        assert_eq!(sample_pairs(&empty, 3, 3.0, &mut rng).len(), 3);
        assert_eq!(sample_pairs(&empty, 3, 0.5, &mut rng).len(), 1);
        assert!(sample_pairs(&image(1, vec![]), 1, 3.0, &mut rng).is_empty());
    }

    #[test]
    fn sampling_deterministic() {
        let img = image(6, vec![t(0, 1, 1)]);
        let a = sample_pairs(&img, 6, 3.0, &mut init_rng(9));
        let b = sample_pairs(&img, 6, 3.0, &mut init_rng(9));
        assert_eq!(a, b);
    }

    fn scalar_params(w: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::vector(vec![w])).unwrap();
        p
    }

    #[test]
    fn adam_hand_trace() {
        let cfg = TrainConfig::default();
        let mut params = scalar_params(1.0);
        let mut state = OptimizerState::new(&params);
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (step, g) in [0.5, -0.2, 0.3].into_iter().enumerate() {
            let grads: GradMap = [("w".to_string(), vec![g])].into();
            adam_step(&mut params, &grads, &mut state, &cfg, lr).unwrap();
            let t = (step + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            assert!((params.get("w").unwrap().data()[0] - w).abs() < 1e-12);
        }
        assert_eq!(state.step, 3);
    }

    #[test]
    fn adam_zero_grad_and_constant_limit() {
        let cfg = TrainConfig::default();
        let mut params = scalar_params(2.0);
        let mut state = OptimizerState::new(&params);
        adam_step(&mut params, &GradMap::new(), &mut state, &cfg, 0.1).unwrap();
        assert_eq!(params.get("w").unwrap().data()[0], 2.0);
        assert_eq!(state.step, 1);

        let grads: GradMap = [("w".to_string(), vec![3.0])].into();
        let mut state = OptimizerState::new(&params);
        let mut prev = 2.0;
        for _ in 0..200 {
            adam_step(&mut params, &grads, &mut state, &cfg, 0.01).unwrap();
            let now = params.get("w").unwrap().data()[0];
            let delta = prev - now;
            assert!(delta > 0.0 && delta <= 0.01 + 1e-9);
            prev = now;
        }
        assert!((prev - (2.0 - 200.0 * 0.01)).abs() < 1e-6);
        let nan: GradMap = [("w".to_string(), vec![f64::NAN])].into();
        let err = adam_step(&mut params, &nan, &mut state, &cfg, 0.01).unwrap_err();
        assert!(err.to_string().contains('w'));
    }

    #[test]
    fn loss_hand_cases() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 0.5, 0.0, -1.0, 3.0]).unwrap());
        let l = object_loss(&mut tape, logits, &[1, 2]).unwrap();
        let ce = |row: [f64; 3], y: usize| {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            z.ln() - row[y]
        };
        let want = 0.5 * (ce([1.0, 2.0, 0.5], 1) + ce([0.0, -1.0, 3.0], 2));
        assert!((tape.value(l).data()[0] - want).abs() < 1e-12);

        let uniform = tape.constant(Tensor::zeros(&[3, 5]));
        let l = relation_loss(&mut tape, uniform, &[0, 4, 2]).unwrap();
        assert!((tape.value(l).data()[0] - 5f64.ln()).abs() < 1e-12);

        let peaked = tape.constant(Tensor::matrix(2, 3, vec![800.0, 0.0, 0.0, 800.0, 0.0, 0.0]).unwrap());
        let l = relation_loss(&mut tape, peaked, &[0, 0]).unwrap();
        assert!(tape.value(l).data()[0].abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            negative_ratio: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
