//! Relationship component: for every ordered region pair, a small graph with
//! a subject node, an object node and one node per predicate class. Edges
//! between the object nodes and predicate node `k` carry the prior
//! `m[subj_label][obj_label][k]`.
//!
//! A batch of `P` pairs is stored as a `P·(2+K) × d` matrix; within each
//! pair's block row 0 is the subject, row 1 the object, and row `2+k` the
//! predicate node `k` (node 0 being no-relationship).

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, SparseMatrix, Tape, Var};
use crate::dataset::{iou, AnnotatedImage};
use crate::error::{Error, Result};
use crate::knowledge::KnowledgeBase;
use crate::model::{Model, Task};
use crate::nn::{gru_cell, insert_gru, insert_linear, GruVars, LinearVars};
use crate::object_router::{argmax, object_logits, ObjectGraph, ObjectRouterVars};
use crate::tensor::{write_atomic, ParameterSet, Tensor};

/// Length of the spatial block appended by [`encode_union`].
pub const SPATIAL_DIM: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RelationRouterConfig {
    pub num_predicates: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub steps: usize,
}

impl RelationRouterConfig {
    pub fn union_dim(&self) -> usize {
        self.feature_dim + SPATIAL_DIM
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_predicates < 2 || self.feature_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::Validation("relation router dimensions out of range".into()));
        }
        if self.steps == 0 {
            return Err(Error::Validation("relation router needs at least one propagation step".into()));
        }
        Ok(())
    }
}

/// Registers `rel.obj_init`, `rel.union_init`, `rel.gru`, `rel.out`, `rel.cls`.
pub fn insert_params(params: &mut ParameterSet, cfg: &RelationRouterConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    let d = cfg.hidden_dim;
    insert_linear(params, "rel.obj_init", cfg.feature_dim, d, rng)?;
    insert_linear(params, "rel.union_init", cfg.union_dim(), d, rng)?;
    insert_gru(params, "rel.gru", d, d, rng)?;
    insert_linear(params, "rel.out", 2 * d, cfg.output_dim, rng)?;
    insert_linear(params, "rel.cls", (cfg.num_predicates + 2) * cfg.output_dim, cfg.num_predicates, rng)
}

#[derive(Clone, Copy, Debug)]
pub struct RelationRouterVars {
    pub obj_init: LinearVars,
    pub union_init: LinearVars,
    pub gru: GruVars,
    pub out: LinearVars,
    pub cls: LinearVars,
}

impl RelationRouterVars {
    pub fn load(tape: &mut Tape, params: &ParameterSet) -> Result<Self> {
        Ok(RelationRouterVars {
            obj_init: LinearVars::load(tape, params, "rel.obj_init")?,
            union_init: LinearVars::load(tape, params, "rel.union_init")?,
            gru: GruVars::load(tape, params, "rel.gru")?,
            out: LinearVars::load(tape, params, "rel.out")?,
            cls: LinearVars::load(tape, params, "rel.cls")?,
        })
    }
}

/// Union-region descriptor: the mean of the two region features followed by
/// `[cx_i/W, cy_i/H, w_i/W, h_i/H, cx_j/W, cy_j/H, w_j/W, h_j/H, IoU]`.
pub fn encode_union(
    subj_box: &[f64; 4],
    obj_box: &[f64; 4],
    subj_feature: &[f64],
    obj_feature: &[f64],
    width: f64,
    height: f64,
) -> Result<Vec<f64>> {
    if subj_feature.len() != obj_feature.len() {
        return Err(Error::dim("encode_union", &[subj_feature.len()], &[obj_feature.len()]));
    }
    for b in [subj_box, obj_box] {
        if !(b[2] > b[0] && b[3] > b[1]) {
            return Err(Error::Validation(format!("degenerate box {b:?}")));
        }
    }
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::Validation(format!("image size {width}x{height}")));
    }
    let mut out: Vec<f64> = subj_feature
        .iter()
        .zip(obj_feature)
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    for b in [subj_box, obj_box] {
        out.extend([
            0.5 * (b[0] + b[2]) / width,
            0.5 * (b[1] + b[3]) / height,
            (b[2] - b[0]) / width,
            (b[3] - b[1]) / height,
        ]);
    }
    out.push(iou(subj_box, obj_box));
    Ok(out)
}

/// One ordered pair's inputs to the relation graph.
#[derive(Clone, Debug, PartialEq)]
pub struct PairInput {
    pub subj_feature: Vec<f64>,
    pub obj_feature: Vec<f64>,
    pub union_feature: Vec<f64>,
    pub subj_label: usize,
    pub obj_label: usize,
}

impl PairInput {
    pub fn from_image(img: &AnnotatedImage, subj: usize, obj: usize, labels: &[usize]) -> Result<Self> {
        let (s, o) = (&img.regions[subj], &img.regions[obj]);
        Ok(PairInput {
            union_feature: encode_union(
                &s.bbox,
                &o.bbox,
                &s.feature,
                &o.feature,
                img.width as f64,
                img.height as f64,
            )?,
            subj_feature: s.feature.clone(),
            obj_feature: o.feature.clone(),
            subj_label: labels[subj],
            obj_label: labels[obj],
        })
    }
}

/// Fixed structure of a batch of pair graphs.
#[derive(Clone, Debug)]
pub struct PairGraph {
    pub pairs: usize,
    pub predicates: usize,
    /// `P(2+K) × 3P`: places subject, object and union projections.
    pub assemble: Arc<SparseMatrix>,
    /// `P(2+K) × P(2+K)`: prior-weighted bipartite message routing.
    pub messages: Arc<SparseMatrix>,
}

impl PairGraph {
    /// `fibers` holds `P` consecutive length-`K` prior fibers.
    pub fn new(fibers: &[f64], predicates: usize) -> Result<Self> {
        let k = predicates;
        if k == 0 || !fibers.len().is_multiple_of(k) || fibers.is_empty() {
            return Err(Error::dim("pair_graph", &[k], &[fibers.len()]));
        }
        let p = fibers.len() / k;
        let block = k + 2;
        let mut assemble = Vec::with_capacity(p * block);
        let mut messages = Vec::with_capacity(p * 4 * k);
        for (pi, fiber) in fibers.chunks_exact(k).enumerate() {
            let base = pi * block;
            assemble.push((base, pi, 1.0));
            assemble.push((base + 1, p + pi, 1.0));
            for kk in 0..k {
                let node = base + 2 + kk;
                assemble.push((node, 2 * p + pi, 1.0));
                let w = fiber[kk];
                messages.push((base, node, w));
                messages.push((base + 1, node, w));
                messages.push((node, base, w));
                messages.push((node, base + 1, w));
            }
        }
        Ok(PairGraph {
            pairs: p,
            predicates: k,
            assemble: Arc::new(SparseMatrix::from_triplets(p * block, 3 * p, assemble)?),
            messages: Arc::new(SparseMatrix::from_triplets(p * block, p * block, messages)?),
        })
    }
}

/// Stacks the per-pair feature rows: (subjects `P×d_f`, objects `P×d_f`, unions `P×d_u`).
pub fn pair_tensors(pairs: &[PairInput]) -> Result<(Tensor, Tensor, Tensor)> {
    let rows = |f: fn(&PairInput) -> &Vec<f64>| -> Result<Tensor> {
        let v: Vec<Vec<f64>> = pairs.iter().map(|p| f(p).clone()).collect();
        Tensor::from_rows(&v)
    };
    Ok((
        rows(|p| &p.subj_feature)?,
        rows(|p| &p.obj_feature)?,
        rows(|p| &p.union_feature)?,
    ))
}

/// Object nodes start from `obj_init(f_i)`, `obj_init(f_j)`; every predicate
/// node starts from `union_init(f_ij)`.
pub fn init_pair_hidden(
    tape: &mut Tape,
    subj: Var,
    obj: Var,
    union: Var,
    graph: &PairGraph,
    vars: &RelationRouterVars,
) -> Result<Var> {
    for (v, lin) in [(subj, &vars.obj_init), (obj, &vars.obj_init), (union, &vars.union_init)] {
        let (rows, cols) = tape.value(v).dims2()?;
        let (w_in, _) = lin.dims(tape);
        if rows != graph.pairs || cols != w_in {
            return Err(Error::dim("init_pair_hidden", &[rows, cols], &[graph.pairs, w_in]));
        }
    }
    let hs = vars.obj_init.apply(tape, subj)?;
    let ho = vars.obj_init.apply(tape, obj)?;
    let hr = vars.union_init.apply(tape, union)?;
    let stacked = tape.concat_rows(&[hs, ho, hr])?;
    tape.spmm(graph.assemble.clone(), stacked)
}

/// Object nodes receive `Σ_k m_k·h_k`; predicate node `k` receives `m_k·(h_subj + h_obj)`.
pub fn aggregate_pair_messages(tape: &mut Tape, h: Var, graph: &PairGraph) -> Result<Var> {
    tape.spmm(graph.messages.clone(), h)
}

pub fn propagate_pair(tape: &mut Tape, h0: Var, graph: &PairGraph, gru: &GruVars, steps: usize) -> Result<Var> {
    let mut h = h0;
    for _ in 0..steps {
        let a = aggregate_pair_messages(tape, h, graph)?;
        h = gru_cell(tape, a, h, gru)?;
    }
    Ok(h)
}

/// Node outputs `out([hᵀ ; h⁰])`, concatenated per pair in node order and
/// classified into `K` logits (index 0 is no-relationship). Returns `P × K`.
pub fn classify_relation(tape: &mut Tape, h0: Var, ht: Var, graph: &PairGraph, vars: &RelationRouterVars) -> Result<Var> {
    let joined = tape.concat_cols(&[ht, h0])?;
    let node_out = vars.out.apply(tape, joined)?;
    let (_, d_out) = tape.value(node_out).dims2()?;
    let per_pair = tape.reshape(node_out, &[graph.pairs, (graph.predicates + 2) * d_out])?;
    vars.cls.apply(tape, per_pair)
}

/// Full relation component for a batch of pairs; returns `P × K` logits.
pub fn relation_logits(
    tape: &mut Tape,
    vars: &RelationRouterVars,
    pairs: &[PairInput],
    kb: &KnowledgeBase,
    steps: usize,
) -> Result<Var> {
    let mut fibers = Vec::with_capacity(pairs.len() * kb.num_predicates());
    for p in pairs {
        fibers.extend_from_slice(kb.fiber(p.subj_label, p.obj_label)?);
    }
    let graph = PairGraph::new(&fibers, kb.num_predicates())?;
    let (s, o, u) = pair_tensors(pairs)?;
    let (s, o, u) = (tape.constant(s), tape.constant(o), tape.constant(u));
    let h0 = init_pair_hidden(tape, s, o, u, &graph, vars)?;
    let ht = propagate_pair(tape, h0, &graph, &vars.gru, steps)?;
    classify_relation(tape, h0, ht, &graph, vars)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairPrediction {
    pub subj: usize,
    pub obj: usize,
    pub probs: Vec<f64>,
}

/// Per-region label distributions and per-ordered-pair predicate distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedGraph {
    pub image_id: String,
    pub objects: Vec<Vec<f64>>,
    pub pairs: Vec<PairPrediction>,
    /// Region boxes, for box-based matching of externally produced detections.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<[f64; 4]>>,
}

impl PredictedGraph {
    /// Most likely label of each region (ties to the lowest index).
    pub fn labels(&self) -> Vec<usize> {
        self.objects.iter().map(|p| argmax(p)).collect()
    }
}

/// Runs the model on one image. PredCls uses the annotated labels (as
/// one-hot distributions); SGCls labels regions with the object router and
/// indexes the prior with those predictions.
pub fn predict_graph(image: &AnnotatedImage, kb: &KnowledgeBase, model: &Model, task: Task) -> Result<PredictedGraph> {
    let spec = &model.spec;
    if kb.num_categories() != spec.num_categories || kb.num_predicates() != spec.num_predicates {
        return Err(Error::Validation(format!(
            "knowledge base is C={}, K={} but model expects C={}, K={}",
            kb.num_categories(),
            kb.num_predicates(),
            spec.num_categories,
            spec.num_predicates
        )));
    }
    let n = image.regions.len().min(spec.config.max_regions);
    let c = spec.num_categories;
    if n == 0 {
        return Ok(PredictedGraph {
            image_id: image.image_id.clone(),
            objects: Vec::new(),
            pairs: Vec::new(),
            boxes: None,
        });
    }
    let mut tape = Tape::new();
    let objects: Vec<Vec<f64>> = match task {
        Task::PredCls => image.regions[..n]
            .iter()
            .map(|r| {
                let mut p = vec![0.0; c];
                p[r.label] = 1.0;
                p
            })
            .collect(),
        Task::SgCls => {
            let vars = ObjectRouterVars::load(&mut tape, &model.params)?;
            let features = model.feature_matrix(image, n)?;
            let graph = ObjectGraph::new(n, kb.cooccurrence(), c)?;
            let logits = object_logits(&mut tape, &vars, &features, &graph, spec.config.object_steps)?;
            let t = tape.value(logits);
            (0..n).map(|i| softmax(t.row(i))).collect()
        }
    };
    let labels: Vec<usize> = objects.iter().map(|p| argmax(p)).collect();

    let mut pairs = Vec::new();
    let mut inputs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                pairs.push((i, j));
                inputs.push(PairInput::from_image(image, i, j, &labels)?);
            }
        }
    }
    let mut pair_preds = Vec::with_capacity(pairs.len());
    if !inputs.is_empty() {
        let vars = RelationRouterVars::load(&mut tape, &model.params)?;
        let logits = relation_logits(&mut tape, &vars, &inputs, kb, spec.config.relation_steps)?;
        let t = tape.value(logits);
        for (p, &(subj, obj)) in pairs.iter().enumerate() {
            pair_preds.push(PairPrediction {
                subj,
                obj,
                probs: softmax(t.row(p)),
            });
        }
    }
    Ok(PredictedGraph {
        image_id: image.image_id.clone(),
        objects,
        pairs: pair_preds,
        boxes: None,
    })
}

pub fn parse_predictions(text: &str) -> Result<Vec<PredictedGraph>> {
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

pub fn read_predictions(path: &Path) -> Result<Vec<PredictedGraph>> {
    parse_predictions(&fs::read_to_string(path)?)
}

pub fn write_predictions(path: &Path, preds: &[PredictedGraph]) -> Result<()> {
    let mut out = String::new();
    for p in preds {
        out.push_str(&serde_json::to_string(p).expect("predictions serialize"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}
