//! Cellular complex encoder.
//!
//! Each layer updates every cell of dimension `r` from four neighborhood
//! branches (boundary, coboundary, lower, upper). A branch computes
//! `MLP((1 + eps) * h(cell) + sum of h over the neighborhood)`; undefined
//! neighborhoods aggregate to zero. The four branch outputs are concatenated
//! and passed through an update perceptron. The readout concatenates every
//! layer's cell embeddings, sums them per graph and dimension, applies a
//! per-dimension perceptron and adds the three dimension terms.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::complex_lift::{initial_cell_features, LiftError, LiftedGraph, Neighborhood};
use crate::diffcore::{BatchStats, Bindings, Csr, ParamGroup, ParameterStore, Tape, Tensor, TensorError, Var};
use crate::graph_io::Graph;

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum CcnnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Lift(#[from] LiftError),
    #[error("mask has {found} entries but the batch has {expected} 2-cells")]
    MaskLength { expected: usize, found: usize },
    #[error("feature width {found} does not match the configured input width {expected}")]
    FeatureDim { expected: usize, found: usize },
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CcnnConfig {
    pub in_dim: usize,
    pub num_layers: usize,
    pub hidden: usize,
    pub proj_layers: usize,
    pub proj_dim: usize,
    pub normalization: bool,
}

impl CcnnConfig {
    pub fn new(in_dim: usize) -> Self {
        Self {
            in_dim,
            num_layers: 3,
            hidden: 32,
            proj_layers: 2,
            proj_dim: 96,
            normalization: true,
        }
    }

    /// Width of the per-cell jump-concatenated embedding and of `H_X`.
    pub fn jump_width(&self) -> usize {
        self.num_layers * self.hidden
    }
}

/// A lifted graph with its initial cell features.
#[derive(Clone, Debug)]
pub struct PreparedGraph {
    pub lifted: LiftedGraph,
    pub feats: [Tensor; 3],
}

impl PreparedGraph {
    pub fn new(g: &Graph, node_feats: &Tensor, ring_size: usize) -> Result<Self, CcnnError> {
        let lifted = LiftedGraph::new(g, ring_size)?;
        let feats = initial_cell_features(&lifted.complex, node_feats)?;
        Ok(Self { lifted, feats })
    }

    pub fn num_two_cells(&self) -> usize {
        self.lifted.complex.num_cells(2)
    }
}

/// Disjoint union of several complexes, laid out dimension by dimension.
#[derive(Clone, Debug)]
pub struct ComplexBatch {
    pub num_graphs: usize,
    pub counts: [usize; 3],
    pub graph_of: [Arc<Vec<usize>>; 3],
    /// `adj[dim][nb]` lists, for every `dim`-cell, its neighbors in the source dimension.
    pub adj: [[Option<Arc<Csr>>; 4]; 3],
    pub feats: [Tensor; 3],
    /// Row range of each graph's 2-cells: `two_cell_offsets[g]..two_cell_offsets[g + 1]`.
    pub two_cell_offsets: Vec<usize>,
}

impl ComplexBatch {
    pub fn new(items: &[&PreparedGraph]) -> Result<Self, CcnnError> {
        let first = items.first().ok_or(CcnnError::EmptyBatch)?;
        let d = first.feats[0].cols();
        let mut counts = [0usize; 3];
        let mut graph_of: [Vec<usize>; 3] = Default::default();
        let mut data: [Vec<f64>; 3] = Default::default();
        let mut lists: [[Vec<Vec<usize>>; 4]; 3] = Default::default();
        let mut two_cell_offsets = vec![0];
        for (gi, item) in items.iter().enumerate() {
            let c = item.lifted.complex.counts();
            for dim in 0..3 {
                if item.feats[dim].cols() != d {
                    return Err(CcnnError::FeatureDim {
                        expected: d,
                        found: item.feats[dim].cols(),
                    });
                }
                for nb in Neighborhood::ALL {
                    if let Some((src, local)) = item.lifted.tables.local_lists(dim, nb) {
                        let off = counts[src];
                        lists[dim][nb.index()].extend(local.into_iter().map(|l| l.into_iter().map(|j| j + off).collect()));
                    }
                }
            }
            for dim in 0..3 {
                graph_of[dim].extend(std::iter::repeat_n(gi, c[dim]));
                data[dim].extend_from_slice(item.feats[dim].data());
                counts[dim] += c[dim];
            }
            two_cell_offsets.push(counts[2]);
        }
        let mut adj: [[Option<Arc<Csr>>; 4]; 3] = Default::default();
        for dim in 0..3 {
            for nb in Neighborhood::ALL {
                if let Some(src) = nb.source_dim(dim) {
                    adj[dim][nb.index()] = Some(Arc::new(Csr::from_lists(&lists[dim][nb.index()], counts[src])));
                }
            }
        }
        let [d0, d1, d2] = data;
        let feats = [
            Tensor::matrix(counts[0], d, d0)?,
            Tensor::matrix(counts[1], d, d1)?,
            Tensor::matrix(counts[2], d, d2)?,
        ];
        let [g0, g1, g2] = graph_of;
        Ok(Self {
            num_graphs: items.len(),
            counts,
            graph_of: [Arc::new(g0), Arc::new(g1), Arc::new(g2)],
            adj,
            feats,
            two_cell_offsets,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feats[0].cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics (recorded for a later running-stat update).
    Train,
    /// Running statistics.
    Eval,
}

fn mlp_names(prefix: &str) -> [String; 6] {
    [
        format!("{prefix}.lin1.weight"),
        format!("{prefix}.lin1.bias"),
        format!("{prefix}.norm.weight"),
        format!("{prefix}.norm.bias"),
        format!("{prefix}.lin2.weight"),
        format!("{prefix}.lin2.bias"),
    ]
}

pub fn layer_prefix(l: usize, dim: usize) -> String {
    format!("enc.l{l}.d{dim}")
}

pub fn branch_prefix(l: usize, dim: usize, nb: Neighborhood) -> String {
    format!("enc.l{l}.d{dim}.{}", nb.short_name())
}

pub fn readout_prefix(dim: usize) -> String {
    format!("enc.readout.d{dim}")
}

fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..=a)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("shape")
}

fn add_mlp<R: Rng>(
    store: &mut ParameterStore,
    rng: &mut R,
    prefix: &str,
    dims: (usize, usize, usize),
    normalization: bool,
    group: ParamGroup,
) -> Result<(), TensorError> {
    let (i, h, o) = dims;
    let [w1, b1, gw, gb, w2, b2] = mlp_names(prefix);
    store.insert(w1, group, glorot(rng, i, h))?;
    store.insert(b1, group, Tensor::zeros(1, h))?;
    if normalization {
        store.insert(gw, group, Tensor::filled(1, h, 1.0))?;
        store.insert(gb, group, Tensor::zeros(1, h))?;
        store.insert_buffer(format!("{prefix}.norm.running_mean"), Tensor::zeros(1, h))?;
        store.insert_buffer(format!("{prefix}.norm.running_var"), Tensor::filled(1, h, 1.0))?;
    }
    store.insert(w2, group, glorot(rng, h, o))?;
    store.insert(b2, group, Tensor::zeros(1, o))?;
    Ok(())
}

/// Encoder and projection-head parameters, drawn from a seeded stream in a
/// fixed construction order.
pub fn init_params(cfg: &CcnnConfig, seed: u64) -> Result<ParameterStore, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let h = cfg.hidden;
    for l in 0..cfg.num_layers {
        let d_in = if l == 0 { cfg.in_dim } else { h };
        for dim in 0..3 {
            for nb in Neighborhood::ALL {
                let p = branch_prefix(l, dim, nb);
                add_mlp(&mut store, &mut rng, &p, (d_in, h, h), cfg.normalization, ParamGroup::Encoder)?;
                store.insert(format!("{p}.eps"), ParamGroup::Encoder, Tensor::scalar(0.0))?;
            }
            let p = format!("{}.update", layer_prefix(l, dim));
            add_mlp(&mut store, &mut rng, &p, (4 * h, h, h), cfg.normalization, ParamGroup::Encoder)?;
        }
    }
    let jw = cfg.jump_width();
    for dim in 0..3 {
        add_mlp(&mut store, &mut rng, &readout_prefix(dim), (jw, h, jw), cfg.normalization, ParamGroup::Encoder)?;
    }
    let mut width = jw;
    for k in 0..cfg.proj_layers {
        store.insert(format!("head.lin{k}.weight"), ParamGroup::Head, glorot(&mut rng, width, cfg.proj_dim))?;
        store.insert(format!("head.lin{k}.bias"), ParamGroup::Head, Tensor::zeros(1, cfg.proj_dim))?;
        width = cfg.proj_dim;
    }
    Ok(store)
}

/// Everything a forward pass needs besides the tape.
pub struct Encoder<'a> {
    pub cfg: &'a CcnnConfig,
    pub store: &'a ParameterStore,
    pub bindings: &'a Bindings,
    pub mode: NormMode,
    /// Batch statistics observed in training mode, keyed by perceptron prefix.
    pub stats: Vec<(String, BatchStats, usize)>,
}

/// Per-dimension jump-concatenated cell embeddings.
#[derive(Clone, Copy, Debug)]
pub struct CellStates {
    pub jump: [Var; 3],
}

impl<'a> Encoder<'a> {
    pub fn new(cfg: &'a CcnnConfig, store: &'a ParameterStore, bindings: &'a Bindings, mode: NormMode) -> Self {
        Self {
            cfg,
            store,
            bindings,
            mode,
            stats: Vec::new(),
        }
    }

    fn normalize(&mut self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var, CcnnError> {
        let n = tape.value(x).rows();
        let use_batch = self.mode == NormMode::Train && n >= 2;
        let y = if use_batch {
            let (y, stats) = tape.batch_normalize(x)?;
            self.stats.push((prefix.to_string(), stats, n));
            y
        } else {
            let missing = || TensorError::UnknownParameter(format!("{prefix}.norm.running_mean"));
            let mean = self.store.buffer(&format!("{prefix}.norm.running_mean")).ok_or_else(missing)?;
            let var = self
                .store
                .buffer(&format!("{prefix}.norm.running_var"))
                .ok_or_else(|| TensorError::UnknownParameter(format!("{prefix}.norm.running_var")))?;
            tape.normalize_with(x, mean.data(), var.data())?
        };
        let gamma = self.bindings.get(&format!("{prefix}.norm.weight"))?;
        let beta = self.bindings.get(&format!("{prefix}.norm.bias"))?;
        let y = tape.mul_row(y, gamma)?;
        Ok(tape.add_row(y, beta)?)
    }

    /// linear -> normalize -> relu -> linear
    pub fn mlp(&mut self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var, CcnnError> {
        let [w1, b1, _, _, w2, b2] = mlp_names(prefix);
        let w1 = self.bindings.get(&w1)?;
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, self.bindings.get(&b1)?)?;
        let h = if self.cfg.normalization { self.normalize(tape, prefix, h)? } else { h };
        let h = tape.relu(h)?;
        let o = tape.matmul(h, self.bindings.get(&w2)?)?;
        Ok(tape.add_row(o, self.bindings.get(&b2)?)?)
    }

    /// Runs all layers and returns the jump-concatenated cell embeddings.
    pub fn message_passing(&mut self, tape: &mut Tape, batch: &ComplexBatch) -> Result<CellStates, CcnnError> {
        if batch.feature_dim() != self.cfg.in_dim {
            return Err(CcnnError::FeatureDim {
                expected: self.cfg.in_dim,
                found: batch.feature_dim(),
            });
        }
        let mut h: Vec<Var> = batch.feats.iter().map(|f| tape.constant(f.clone())).collect();
        let mut layers: [Vec<Var>; 3] = Default::default();
        for l in 0..self.cfg.num_layers {
            let mut next = Vec::with_capacity(3);
            for dim in 0..3 {
                let mut branches = Vec::with_capacity(4);
                for nb in Neighborhood::ALL {
                    let p = branch_prefix(l, dim, nb);
                    let eps = self.bindings.get(&format!("{p}.eps"))?;
                    let scaled = tape.mul_scalar(h[dim], eps)?;
                    let own = tape.add(h[dim], scaled)?;
                    let input = match (&batch.adj[dim][nb.index()], nb.source_dim(dim)) {
                        (Some(adj), Some(src)) => {
                            let agg = tape.aggregate(h[src], adj.clone())?;
                            tape.add(own, agg)?
                        }
                        _ => own,
                    };
                    branches.push(self.mlp(tape, &p, input)?);
                }
                let cat = tape.concat_cols(&branches)?;
                let out = self.mlp(tape, &format!("{}.update", layer_prefix(l, dim)), cat)?;
                next.push(out);
            }
            for dim in 0..3 {
                layers[dim].push(next[dim]);
            }
            h = next;
        }
        let jump = [
            tape.concat_cols(&layers[0])?,
            tape.concat_cols(&layers[1])?,
            tape.concat_cols(&layers[2])?,
        ];
        Ok(CellStates { jump })
    }

    /// `H_X` per graph. `mask` (one entry per 2-cell, `n2 x 1`) weights the
    /// 2-cell contributions; message passing is unaffected.
    pub fn readout(
        &mut self,
        tape: &mut Tape,
        states: &CellStates,
        batch: &ComplexBatch,
        mask: Option<Var>,
    ) -> Result<Var, CcnnError> {
        let mut total: Option<Var> = None;
        for dim in 0..3 {
            let mut cells = states.jump[dim];
            if dim == 2 {
                if let Some(m) = mask {
                    let found = tape.value(m).rows();
                    if found != batch.counts[2] || tape.value(m).cols() != 1 {
                        return Err(CcnnError::MaskLength {
                            expected: batch.counts[2],
                            found,
                        });
                    }
                    cells = tape.mul_col(cells, m)?;
                }
            }
            let pooled = tape.segment_sum(cells, batch.graph_of[dim].clone(), batch.num_graphs)?;
            let term = self.mlp(tape, &readout_prefix(dim), pooled)?;
            total = Some(match total {
                None => term,
                Some(t) => tape.add(t, term)?,
            });
        }
        Ok(total.expect("three dimensions"))
    }

    /// Projection head followed by row-wise L2 normalization.
    pub fn project(&mut self, tape: &mut Tape, h: Var) -> Result<Var, CcnnError> {
        project(tape, self.bindings, self.cfg, h)
    }
}

pub fn project(tape: &mut Tape, bindings: &Bindings, cfg: &CcnnConfig, h: Var) -> Result<Var, CcnnError> {
    let mut x = h;
    for k in 0..cfg.proj_layers {
        if k > 0 {
            x = tape.relu(x)?;
        }
        x = tape.matmul(x, bindings.get(&format!("head.lin{k}.weight"))?)?;
        x = tape.add_row(x, bindings.get(&format!("head.lin{k}.bias"))?)?;
    }
    Ok(tape.l2_normalize_rows(x)?)
}

/// Exponential moving update of normalization buffers from observed batch
/// statistics (variance stored unbiased).
pub fn update_running_stats(store: &mut ParameterStore, stats: &[(String, BatchStats, usize)]) {
    for (prefix, s, n) in stats {
        let unbias = if *n > 1 { *n as f64 / (*n as f64 - 1.0) } else { 1.0 };
        if let Some(m) = store.buffer_mut(&format!("{prefix}.norm.running_mean")) {
            for (r, b) in m.data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
        if let Some(v) = store.buffer_mut(&format!("{prefix}.norm.running_var")) {
            for (r, b) in v.data_mut().iter_mut().zip(&s.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * unbias;
            }
        }
    }
}

/// Eval-mode `H_X` for every graph of the batch (rows in batch order).
pub fn encode(store: &ParameterStore, cfg: &CcnnConfig, batch: &ComplexBatch) -> Result<Tensor, CcnnError> {
    encode_impl(store, cfg, batch, None)
}

/// Eval-mode `H'_X` with a fixed per-2-cell mask.
pub fn encode_trimmed(
    store: &ParameterStore,
    cfg: &CcnnConfig,
    batch: &ComplexBatch,
    mask: &[f64],
) -> Result<Tensor, CcnnError> {
    if mask.len() != batch.counts[2] {
        return Err(CcnnError::MaskLength {
            expected: batch.counts[2],
            found: mask.len(),
        });
    }
    encode_impl(store, cfg, batch, Some(mask))
}

fn encode_impl(
    store: &ParameterStore,
    cfg: &CcnnConfig,
    batch: &ComplexBatch,
    mask: Option<&[f64]>,
) -> Result<Tensor, CcnnError> {
    let mut tape = Tape::new();
    let bindings = store.bind(&mut tape);
    let mut enc = Encoder::new(cfg, store, &bindings, NormMode::Eval);
    let states = enc.message_passing(&mut tape, batch)?;
    let m = match mask {
        Some(m) => Some(tape.constant(Tensor::matrix(m.len(), 1, m.to_vec())?)),
        None => None,
    };
    let h = enc.readout(&mut tape, &states, batch, m)?;
    Ok(tape.value(h).clone())
}

/// Eval-mode unit-norm projections `Z` for every graph of the batch.
pub fn encode_projected(store: &ParameterStore, cfg: &CcnnConfig, batch: &ComplexBatch) -> Result<Tensor, CcnnError> {
    let mut tape = Tape::new();
    let bindings = store.bind(&mut tape);
    let mut enc = Encoder::new(cfg, store, &bindings, NormMode::Eval);
    let states = enc.message_passing(&mut tape, batch)?;
    let h = enc.readout(&mut tape, &states, batch, None)?;
    let z = enc.project(&mut tape, h)?;
    Ok(tape.value(z).clone())
}
