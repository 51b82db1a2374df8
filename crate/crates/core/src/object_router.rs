//! Object component: every region is duplicated into one node per category,
//! nodes exchange messages weighted by the co-occurrence matrix, and a
//! classifier reads all of a region's category nodes to label it.
//!
//! Node states for an image with `n` regions are stored as an `(n·C) × d`
//! matrix whose row `i·C + c` is the node pairing region `i` with category `c`.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{SparseMatrix, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{gru_cell, insert_gru, insert_linear, GruVars, LinearVars};
use crate::tensor::{ParameterSet, Tensor};

pub const PREFIX: &str = "obj";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObjectRouterConfig {
    pub num_categories: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub steps: usize,
}

impl ObjectRouterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_categories == 0 || self.feature_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::Validation("object router dimensions must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::Validation("object router needs at least one propagation step".into()));
        }
        Ok(())
    }
}

/// Registers `obj.init`, `obj.gru`, `obj.out` and `obj.cls`.
pub fn insert_params(params: &mut ParameterSet, cfg: &ObjectRouterConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    let (c, d) = (cfg.num_categories, cfg.hidden_dim);
    insert_linear(params, "obj.init", cfg.feature_dim, d, rng)?;
    insert_gru(params, "obj.gru", 2 * d, d, rng)?;
    insert_linear(params, "obj.out", 2 * d, cfg.output_dim, rng)?;
    insert_linear(params, "obj.cls", c * cfg.output_dim, c, rng)
}

/// Object-router parameters recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ObjectRouterVars {
    pub init: LinearVars,
    pub gru: GruVars,
    pub out: LinearVars,
    pub cls: LinearVars,
}

impl ObjectRouterVars {
    pub fn load(tape: &mut Tape, params: &ParameterSet) -> Result<Self> {
        Ok(ObjectRouterVars {
            init: LinearVars::load(tape, params, "obj.init")?,
            gru: GruVars::load(tape, params, "obj.gru")?,
            out: LinearVars::load(tape, params, "obj.out")?,
            cls: LinearVars::load(tape, params, "obj.cls")?,
        })
    }
}

/// Fixed mixing matrices of one image's node graph.
#[derive(Clone, Debug)]
pub struct ObjectGraph {
    pub regions: usize,
    pub categories: usize,
    /// `n·C × n`: copies region `i` into each of its category nodes.
    pub replicate: Arc<SparseMatrix>,
    /// `n·C × n·C`: `[(i,c),(j,c')] = M[c'][c]` for `j ≠ i`.
    pub incoming: Arc<SparseMatrix>,
    /// `n·C × n·C`: `[(i,c),(j,c')] = M[c][c']` for `j ≠ i`.
    pub outgoing: Arc<SparseMatrix>,
}

impl ObjectGraph {
    pub fn new(regions: usize, cooccurrence: &[f64], categories: usize) -> Result<Self> {
        let c = categories;
        if cooccurrence.len() != c * c {
            return Err(Error::dim("object_graph", &[c, c], &[cooccurrence.len()]));
        }
        if regions == 0 {
            return Err(Error::Contract("object graph needs at least one region".into()));
        }
        let n = regions;
        let nodes = n * c;
        let replicate = (0..nodes).map(|row| (row, row / c, 1.0)).collect();
        let mut incoming = Vec::with_capacity(nodes * nodes);
        let mut outgoing = Vec::with_capacity(nodes * nodes);
        for i in 0..n {
            for ci in 0..c {
                let row = i * c + ci;
                for j in (0..n).filter(|&j| j != i) {
                    for cj in 0..c {
                        let col = j * c + cj;
                        incoming.push((row, col, cooccurrence[cj * c + ci]));
                        outgoing.push((row, col, cooccurrence[ci * c + cj]));
                    }
                }
            }
        }
        Ok(ObjectGraph {
            regions: n,
            categories: c,
            replicate: Arc::new(SparseMatrix::from_triplets(nodes, n, replicate)?),
            incoming: Arc::new(SparseMatrix::from_triplets(nodes, nodes, incoming)?),
            outgoing: Arc::new(SparseMatrix::from_triplets(nodes, nodes, outgoing)?),
        })
    }
}

/// `h⁰[i,c] = init(f_i)` for every category `c`.
pub fn init_object_hidden(tape: &mut Tape, features: Var, graph: &ObjectGraph, vars: &ObjectRouterVars) -> Result<Var> {
    let (rows, d_f) = tape.value(features).dims2()?;
    let (w_in, _) = vars.init.dims(tape);
    if rows != graph.regions || d_f != w_in {
        return Err(Error::dim("init_object_hidden", &[rows, d_f], &[graph.regions, w_in]));
    }
    let projected = vars.init.apply(tape, features)?;
    tape.spmm(graph.replicate.clone(), projected)
}

/// `a[i,c] = [Σ_{j≠i,c'} M[c'][c]·h[j,c'] ; Σ_{j≠i,c'} M[c][c']·h[j,c']]`.
pub fn aggregate_object_messages(tape: &mut Tape, h: Var, graph: &ObjectGraph) -> Result<Var> {
    let inc = tape.spmm(graph.incoming.clone(), h)?;
    let out = tape.spmm(graph.outgoing.clone(), h)?;
    tape.concat_cols(&[inc, out])
}

/// Synchronous message passing: each step aggregates the previous step's
/// states and applies the shared gated update to every node.
pub fn propagate_objects(tape: &mut Tape, h0: Var, graph: &ObjectGraph, gru: &GruVars, steps: usize) -> Result<Var> {
    let mut h = h0;
    for _ in 0..steps {
        let a = aggregate_object_messages(tape, h, graph)?;
        h = gru_cell(tape, a, h, gru)?;
    }
    Ok(h)
}

/// Per-node output `out([h⁰ ; hᵀ])`, then per-region logits over the
/// concatenation of that region's `C` node outputs. Returns `n × C`.
pub fn classify_objects(tape: &mut Tape, h0: Var, ht: Var, graph: &ObjectGraph, vars: &ObjectRouterVars) -> Result<Var> {
    let joined = tape.concat_cols(&[h0, ht])?;
    let node_out = vars.out.apply(tape, joined)?;
    let (_, d_out) = tape.value(node_out).dims2()?;
    let per_region = tape.reshape(node_out, &[graph.regions, graph.categories * d_out])?;
    vars.cls.apply(tape, per_region)
}

/// Full object component for one image; returns `n × C` logits.
pub fn object_logits(
    tape: &mut Tape,
    vars: &ObjectRouterVars,
    features: &Tensor,
    graph: &ObjectGraph,
    steps: usize,
) -> Result<Var> {
    let f = tape.constant(features.clone());
    let h0 = init_object_hidden(tape, f, graph, vars)?;
    let ht = propagate_objects(tape, h0, graph, &vars.gru, steps)?;
    classify_objects(tape, h0, ht, graph, vars)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
