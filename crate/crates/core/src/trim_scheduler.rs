//! Per-2-cell retain probabilities and Gumbel-Softmax trim masks.
//!
//! `lambda = softmax(h2 W^T + b)` gives each 2-cell a (trim, retain) pair.
//! A relaxed sample `y = softmax((log lambda + g) / zeta)` with standard
//! Gumbel noise `g` turns it into a soft mask `y[:, 1]` applied at readout.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use thiserror::Error;

use crate::ccnn::ComplexBatch;
use crate::diffcore::{Bindings, ParamGroup, ParameterStore, Tape, Tensor, TensorError, Var};

pub const WEIGHT: &str = "sched.weight";
pub const BIAS: &str = "sched.bias";
pub const LAMBDA_FLOOR: f64 = 1e-20;

#[derive(Debug, Error)]
pub enum TrimError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("cell embeddings have width {found}, scheduler expects {expected}")]
    Width { expected: usize, found: usize },
    #[error("noise has {found} rows for {expected} cells")]
    NoiseRows { expected: usize, found: usize },
}

/// `W` (2 x d) and `b` (1 x 2), both zero so every cell starts at (0.5, 0.5).
pub fn init_scheduler(store: &mut ParameterStore, d: usize) -> Result<(), TensorError> {
    store.insert(WEIGHT, ParamGroup::Scheduler, Tensor::zeros(2, d))?;
    store.insert(BIAS, ParamGroup::Scheduler, Tensor::zeros(1, 2))?;
    Ok(())
}

/// Row `a` is `lambda_a = softmax(W h2_a + b)`.
pub fn trim_logits(tape: &mut Tape, bindings: &Bindings, h2: Var) -> Result<Var, TrimError> {
    let w = bindings.get(WEIGHT)?;
    let d = tape.value(w).cols();
    if tape.value(h2).cols() != d {
        return Err(TrimError::Width {
            expected: d,
            found: tape.value(h2).cols(),
        });
    }
    let wt = tape.transpose(w)?;
    let z = tape.matmul(h2, wt)?;
    let z = tape.add_row(z, bindings.get(BIAS)?)?;
    Ok(tape.softmax_rows(z)?)
}

/// Relaxed sample for fixed noise `g` (n x 2). Returns `y` (n x 2) whose rows
/// sum to exactly one.
pub fn gumbel_softmax(tape: &mut Tape, lambda: Var, noise: &Tensor, zeta: f64) -> Result<Var, TrimError> {
    if !(zeta > 0.0) {
        return Err(TrimError::Temperature(zeta));
    }
    let n = tape.value(lambda).rows();
    if noise.rows() != n || noise.cols() != 2 {
        return Err(TrimError::NoiseRows {
            expected: n,
            found: noise.rows(),
        });
    }
    if tape.value(lambda).data().iter().any(|&v| v < LAMBDA_FLOOR) {
        log::warn!("retain probabilities below {LAMBDA_FLOOR:e} clamped");
    }
    let clamped = tape.clamp_min(lambda, LAMBDA_FLOOR)?;
    let logs = tape.log(clamped)?;
    let g = tape.constant(noise.clone());
    let perturbed = tape.add(logs, g)?;
    let scaled = tape.scale(perturbed, 1.0 / zeta)?;
    let soft = tape.softmax_rows(scaled)?;
    let retain = tape.select_col(soft, 1)?;
    let ones = tape.constant(Tensor::filled(n, 1, 1.0));
    let trim = tape.sub(ones, retain)?;
    Ok(tape.concat_cols(&[trim, retain])?)
}

/// Retain weights `y[:, 1]` as an `n x 1` column.
pub fn retain_column(tape: &mut Tape, y: Var) -> Result<Var, TrimError> {
    Ok(tape.select_col(y, 1)?)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the noise stream for one graph in one round (step or epoch).
pub fn stream_seed(seed: u64, graph: usize, round: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ graph as u64) ^ round)
}

/// Standard Gumbel draws, `n x 2`, from a seeded stream.
pub fn gumbel_noise(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Gumbel::new(0.0, 1.0).expect("unit scale");
    let data = (0..2 * n).map(|_| dist.sample(&mut rng)).collect();
    Tensor::matrix(n, 2, data).expect("shape")
}

/// Noise for a batch: each graph's 2-cells draw from that graph's own stream,
/// so one graph's draws never depend on which other graphs share the batch.
pub fn batch_noise(batch: &ComplexBatch, graph_ids: &[usize], seed: u64, round: u64) -> Tensor {
    let mut data = Vec::with_capacity(2 * batch.counts[2]);
    for (k, &gid) in graph_ids.iter().enumerate() {
        let n = batch.two_cell_offsets[k + 1] - batch.two_cell_offsets[k];
        data.extend_from_slice(gumbel_noise(n, stream_seed(seed, gid, round)).data());
    }
    Tensor::matrix(batch.counts[2], 2, data).expect("shape")
}

/// A sampled soft mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TrimMask {
    /// `y[a] = (trim, retain)`.
    pub weights: Vec<[f64; 2]>,
    pub zeta: f64,
    pub seed: u64,
}

impl TrimMask {
    pub fn retain(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w[1]).collect()
    }
}

/// Draws one relaxed sample per row of `lambda` from the stream `seed`.
pub fn gumbel_sample(lambda: &[[f64; 2]], zeta: f64, seed: u64) -> Result<TrimMask, TrimError> {
    let n = lambda.len();
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::matrix(n, 2, lambda.iter().flatten().copied().collect())?);
    let y = gumbel_softmax(&mut tape, l, &gumbel_noise(n, seed), zeta)?;
    let v = tape.value(y);
    Ok(TrimMask {
        weights: (0..n).map(|r| [v.get(r, 0), v.get(r, 1)]).collect(),
        zeta,
        seed,
    })
}

/// Linear anneal from `start` to `end` over `epochs` (constant `start` when off).
pub fn zeta_at(epoch: usize, epochs: usize, start: f64, end: f64, anneal: bool) -> f64 {
    if !anneal || epochs <= 1 {
        return start;
    }
    let t = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
    start + (end - start) * t
}

/// Lines `graph_id cell_id vertex_set retain_weight`; vertex sets are
/// comma-separated, cell ids are local to the graph's complex.
pub fn format_mask_dump(graph_id: usize, first_cell_id: usize, vertex_sets: &[Vec<usize>], retain: &[f64]) -> String {
    let mut s = String::new();
    for (i, (vs, r)) in vertex_sets.iter().zip(retain).enumerate() {
        let v: Vec<String> = vs.iter().map(usize::to_string).collect();
        writeln!(s, "{graph_id} {} {} {r}", first_cell_id + i, v.join(",")).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lambda_for(w: Tensor, b: Tensor, h: Tensor) -> Tensor {
        let mut store = ParameterStore::new();
        store.insert(WEIGHT, ParamGroup::Scheduler, w).unwrap();
        store.insert(BIAS, ParamGroup::Scheduler, b).unwrap();
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let hv = tape.constant(h);
        let l = trim_logits(&mut tape, &bind, hv).unwrap();
        tape.value(l).clone()
    }

    #[test]
    fn zero_scheduler_gives_half() {
        let h = Tensor::matrix(3, 4, (0..12).map(|i| i as f64 - 5.0).collect()).unwrap();
        let l = lambda_for(Tensor::zeros(2, 4), Tensor::zeros(1, 2), h);
        assert!(l.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn biased_scheduler_matches_softmax_closed_form() {
        let h = Tensor::filled(2, 3, 0.7);
        let l = lambda_for(Tensor::zeros(2, 3), Tensor::row(&[0.0, 10.0]), h);
        let p0 = 1.0 / (1.0 + 10f64.exp());
        for r in 0..2 {
            assert!((l.get(r, 0) - p0).abs() < 1e-15);
            assert!((l.get(r, 0) - 4.5e-5).abs() < 1e-6);
            assert!((l.get(r, 0) + l.get(r, 1) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn width_mismatch_is_reported() {
        let mut store = ParameterStore::new();
        init_scheduler(&mut store, 4).unwrap();
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let h = tape.constant(Tensor::zeros(2, 3));
        assert!(matches!(trim_logits(&mut tape, &bind, h), Err(TrimError::Width { .. })));
    }

    #[test]
    fn samples_sum_to_one_exactly() {
        let lambda: Vec<[f64; 2]> = (1..200).map(|i| [i as f64 / 200.0, 1.0 - i as f64 / 200.0]).collect();
        for zeta in [0.01, 0.3, 1.0, 5.0] {
            let m = gumbel_sample(&lambda, zeta, 17).unwrap();
            assert!(m.weights.iter().all(|w| w[0] + w[1] == 1.0));
        }
    }

    #[test]
    fn invalid_temperature_and_zero_probabilities() {
        assert!(matches!(gumbel_sample(&[[0.5, 0.5]], 0.0, 1), Err(TrimError::Temperature(_))));
        let m = gumbel_sample(&[[1.0, 0.0]], 1.0, 1).unwrap();
        assert!(m.weights[0][1].is_finite());
        assert!(m.weights[0][1] < 1e-6);
    }

    #[test]
    fn streams_are_seed_deterministic() {
        assert_eq!(gumbel_noise(5, 3), gumbel_noise(5, 3));
        assert_ne!(gumbel_noise(5, 3), gumbel_noise(5, 4));
        assert_ne!(stream_seed(0, 1, 0), stream_seed(0, 0, 1));
    }

    #[test]
    fn anneal_schedule() {
        assert_eq!(zeta_at(3, 10, 1.0, 0.1, false), 1.0);
        assert_eq!(zeta_at(0, 10, 1.0, 0.1, true), 1.0);
        assert!((zeta_at(9, 10, 1.0, 0.1, true) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn dump_lines() {
        let s = format_mask_dump(2, 10, &[vec![0, 1, 2]], &[0.25]);
        assert_eq!(s, "2 10 0,1,2 0.25\n");
    }
}
