//! Parameter-perturbation views, the NT-Xent objective and the standard
//! training stage.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::ccnn::{init_params, update_running_stats, CcnnConfig, CcnnError, ComplexBatch, Encoder, NormMode, PreparedGraph};
use crate::config::{Denominator, TrainConfig};
use crate::graph_io::{initial_node_features, FeatureScheme, Graph};
use crate::diffcore::{check_store_gradients, Adam, BatchStats, Bindings, GradCheckReport, ParamGroup, ParameterStore, Tape, Tensor, TensorError, Var};
use crate::trim_scheduler::{self, batch_noise, gumbel_softmax, init_scheduler, stream_seed, trim_logits, TrimError};

pub const UNIT_TOLERANCE: f64 = 1e-9;
const PERTURB_STREAM: u64 = 0x7065_7274;
const SHUFFLE_STREAM: u64 = 0x7368_7566;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ccnn(#[from] CcnnError),
    #[error(transparent)]
    Trim(#[from] TrimError),
    #[error("contrastive loss needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("row {row} has norm {norm}, expected unit norm")]
    NotUnit { row: usize, norm: f64 },
    #[error("loss term {value} of row {row} outside [{lo}, {hi}]")]
    LossBounds { row: usize, value: f64, lo: f64, hi: f64 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Noise offsets `eta * eps` with `eps ~ N(0, std(theta)^2)` elementwise, one
/// entry per encoder tensor with nonzero spread. The projection head and the
/// scheduler are not perturbed.
pub fn perturbation_offsets(store: &ParameterStore, eta: f64, seed: u64) -> BTreeMap<String, Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    if eta == 0.0 {
        return out;
    }
    for (name, p) in store.iter() {
        if p.group != ParamGroup::Encoder {
            continue;
        }
        let std = p.value.population_std();
        if std == 0.0 {
            continue;
        }
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..p.value.len()).map(|_| eta * normal.sample(&mut rng)).collect();
        let delta = Tensor::new(p.value.shape().to_vec(), data).expect("same shape");
        out.insert(name.clone(), delta);
    }
    out
}

/// A perturbed copy of `store`; the original is untouched.
pub fn perturb_params(store: &ParameterStore, eta: f64, seed: u64) -> ParameterStore {
    let offsets = perturbation_offsets(store, eta, seed);
    let mut out = store.clone();
    for (name, delta) in offsets {
        out.get_mut(&name).expect("known name").value.add_assign(&delta);
    }
    out
}

fn check_unit_rows(t: &Tensor) -> Result<(), TrainError> {
    for r in 0..t.rows() {
        let norm = t.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(TrainError::NotUnit { row: r, norm });
        }
    }
    Ok(())
}

/// Mean over `i` of `-log(exp(s_ii / rho) / sum_j exp(s_ij / rho))` where
/// `s_ij` is the cosine similarity of `z_i` and `zt_j`. With
/// [`Denominator::ExcludePositive`] the sum runs over `j != i`.
/// Returns the scalar loss and the `N x 1` per-row terms.
pub fn ntxent_loss(tape: &mut Tape, z: Var, zt: Var, rho: f64, denom: Denominator) -> Result<(Var, Var), TrainError> {
    let n = tape.value(z).rows();
    if n < 2 {
        return Err(TrainError::TooFewSamples(n));
    }
    if tape.value(zt).rows() != n {
        return Err(TensorError::Shape {
            op: "ntxent_loss",
            left: tape.value(z).shape().to_vec(),
            right: tape.value(zt).shape().to_vec(),
        }
        .into());
    }
    check_unit_rows(tape.value(z))?;
    check_unit_rows(tape.value(zt))?;
    let s = tape.cosine_similarity(z, zt)?;
    let logits = tape.scale(s, 1.0 / rho)?;
    let e = tape.exp(logits)?;
    let mut eye = Tensor::zeros(n, n);
    for i in 0..n {
        eye.data_mut()[i * n + i] = 1.0;
    }
    let keep = match denom {
        Denominator::ExcludePositive => eye.map(|v| 1.0 - v),
        Denominator::IncludePositive => Tensor::filled(n, n, 1.0),
    };
    let keep = tape.constant(keep);
    let masked = tape.mul(e, keep)?;
    let denom_sum = tape.row_sum(masked)?;
    let log_denom = tape.log(denom_sum)?;
    let eye = tape.constant(eye);
    let diag = tape.mul(logits, eye)?;
    let pos = tape.row_sum(diag)?;
    let rows = tape.sub(log_denom, pos)?;
    let loss = tape.mean(rows)?;
    Ok((loss, rows))
}

/// Plain-value NT-Xent (no gradients).
pub fn ntxent_value(z: &Tensor, zt: &Tensor, rho: f64, denom: Denominator) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(z.clone()), tape.constant(zt.clone()));
    let (l, _) = ntxent_loss(&mut tape, a, b, rho, denom)?;
    Ok(tape.value(l).item())
}

/// Per-row bounds for unit-norm inputs: `[-2/rho, 2/rho + ln(k)]` with `k`
/// the number of denominator terms.
pub fn row_bounds(n: usize, rho: f64, denom: Denominator) -> (f64, f64) {
    let k = match denom {
        Denominator::ExcludePositive => n - 1,
        Denominator::IncludePositive => n,
    };
    (-2.0 / rho, 2.0 / rho + (k as f64).ln())
}

/// Everything that stays frozen while one batch is evaluated (possibly at
/// several parameter points).
pub struct StepInputs {
    pub batch: ComplexBatch,
    pub graph_ids: Vec<usize>,
    /// Gumbel draws, one row per 2-cell.
    pub noise: Tensor,
    /// Encoder perturbation, drawn once per batch.
    pub offsets: BTreeMap<String, Tensor>,
    pub zeta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub rho: f64,
    pub denominator: Denominator,
    pub symmetric: bool,
    pub trimming: bool,
}

impl LossSettings {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            rho: cfg.rho,
            denominator: cfg.denominator,
            symmetric: cfg.symmetric,
            trimming: cfg.trimming,
        }
    }
}

pub struct Evaluation {
    pub loss: f64,
    pub grads: BTreeMap<String, Tensor>,
    /// Normalization statistics of the clean view.
    pub stats: Vec<(String, BatchStats, usize)>,
    pub mean_retain: f64,
}

/// Forward and backward pass of the full objective at the parameters in `store`.
pub fn evaluate(
    store: &ParameterStore,
    ccnn: &CcnnConfig,
    loss_cfg: &LossSettings,
    inputs: &StepInputs,
    mode: NormMode,
) -> Result<Evaluation, TrainError> {
    let mut tape = Tape::new();
    let bindings = store.bind(&mut tape);
    let fwd = forward(&mut tape, &bindings, store, ccnn, loss_cfg, inputs, mode)?;
    let value = tape.value(fwd.loss).item();
    let vars: Vec<(String, Var)> = bindings.iter().map(|(n, v)| (n.clone(), *v)).collect();
    let g = tape.backward(fwd.loss)?;
    let grads = vars
        .into_iter()
        .map(|(name, var)| {
            let t = g
                .get(var)
                .cloned()
                .unwrap_or_else(|| store.value(&name).expect("bound").zeros_like());
            (name, t)
        })
        .collect();
    Ok(Evaluation {
        loss: value,
        grads,
        stats: fwd.stats,
        mean_retain: fwd.mean_retain,
    })
}

/// Loss value only, plus the sign of every relu input on the way.
pub fn loss_only(
    store: &ParameterStore,
    ccnn: &CcnnConfig,
    loss_cfg: &LossSettings,
    inputs: &StepInputs,
    mode: NormMode,
) -> Result<(f64, Vec<bool>), TrainError> {
    let mut tape = Tape::new();
    tape.track_relu_signs();
    let bindings = store.bind(&mut tape);
    let fwd = forward(&mut tape, &bindings, store, ccnn, loss_cfg, inputs, mode)?;
    let signs = tape.relu_signs().unwrap_or_default().to_vec();
    Ok((tape.value(fwd.loss).item(), signs))
}

struct Forward {
    loss: Var,
    stats: Vec<(String, BatchStats, usize)>,
    mean_retain: f64,
}

fn forward(
    tape: &mut Tape,
    bindings: &Bindings,
    store: &ParameterStore,
    ccnn: &CcnnConfig,
    loss_cfg: &LossSettings,
    inputs: &StepInputs,
    mode: NormMode,
) -> Result<Forward, TrainError> {
    let batch = &inputs.batch;
    let mut clean = Encoder::new(ccnn, store, bindings, mode);
    let states = clean.message_passing(tape, batch)?;
    let mut mean_retain = 1.0;
    let mask = if loss_cfg.trimming && batch.counts[2] > 0 && store.get(trim_scheduler::WEIGHT).is_some() {
        let lambda = trim_logits(tape, bindings, states.jump[2])?;
        let y = gumbel_softmax(tape, lambda, &inputs.noise, inputs.zeta)?;
        let m = tape.select_col(y, 1)?;
        mean_retain = tape.value(m).sum() / batch.counts[2] as f64;
        Some(m)
    } else {
        None
    };
    let h = clean.readout(tape, &states, batch, mask)?;
    let z = clean.project(tape, h)?;
    let stats = std::mem::take(&mut clean.stats);

    let shifted = bindings.shifted(tape, &inputs.offsets)?;
    let mut noisy = Encoder::new(ccnn, store, &shifted, mode);
    let states_t = noisy.message_passing(tape, batch)?;
    let ht = noisy.readout(tape, &states_t, batch, mask)?;
    let zt = noisy.project(tape, ht)?;

    let (mut loss, rows) = ntxent_loss(tape, z, zt, loss_cfg.rho, loss_cfg.denominator)?;
    let (lo, hi) = row_bounds(batch.num_graphs, loss_cfg.rho, loss_cfg.denominator);
    for (row, &value) in tape.value(rows).data().iter().enumerate() {
        if value < lo - 1e-9 || value > hi + 1e-9 {
            return Err(TrainError::LossBounds { row, value, lo, hi });
        }
    }
    if loss_cfg.symmetric {
        let (back, _) = ntxent_loss(tape, zt, z, loss_cfg.rho, loss_cfg.denominator)?;
        let sum = tape.add(loss, back)?;
        loss = tape.scale(sum, 0.5)?;
    }
    Ok(Forward { loss, stats, mean_retain })
}

/// Writes `grads` into the gradient slots of the parameters in `groups`.
pub fn set_grads(store: &mut ParameterStore, grads: &BTreeMap<String, Tensor>, groups: &[ParamGroup]) {
    store.zero_grad();
    for (name, p) in store.iter_mut() {
        if groups.contains(&p.group) {
            if let Some(g) = grads.get(name) {
                p.grad = g.clone();
            }
            p.has_grad = true;
        }
    }
}

/// Shuffled index batches; a trailing batch of one is merged into the previous one.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>, TrainError> {
    if n < 2 {
        return Err(TrainError::TooFewSamples(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, SHUFFLE_STREAM as usize, epoch));
    order.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(2)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().map_or(false, |b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    Ok(batches)
}

/// Model parameters plus optimizer state for both training stages.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub ccnn: CcnnConfig,
    pub store: ParameterStore,
    pub inner: Adam,
    pub outer: Adam,
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, in_dim: usize) -> Result<Self, TrainError> {
        let ccnn = cfg.ccnn(in_dim);
        let mut store = init_params(&ccnn, cfg.seed)?;
        init_scheduler(&mut store, ccnn.jump_width())?;
        Ok(Self {
            cfg: cfg.clone(),
            ccnn,
            store,
            inner: Adam::new(cfg.lr, (0.9, 0.999)),
            outer: Adam::new(cfg.outer_lr, (0.9, 0.999)),
            step: 0,
        })
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings::from_config(&self.cfg)
    }

    pub fn zeta(&self, epoch: usize) -> f64 {
        trim_scheduler::zeta_at(epoch, self.cfg.epochs, self.cfg.zeta, self.cfg.zeta_end, self.cfg.zeta_anneal)
    }

    /// Freezes the batch layout, Gumbel draws and perturbation for step `round`.
    pub fn inputs(&self, data: &[PreparedGraph], ids: &[usize], round: u64, zeta: f64) -> Result<StepInputs, TrainError> {
        let items: Vec<&PreparedGraph> = ids.iter().map(|&i| &data[i]).collect();
        let batch = ComplexBatch::new(&items)?;
        let noise = batch_noise(&batch, ids, self.cfg.seed, round);
        let offsets = perturbation_offsets(&self.store, self.cfg.eta, stream_seed(self.cfg.seed, PERTURB_STREAM as usize, round));
        Ok(StepInputs {
            batch,
            graph_ids: ids.to_vec(),
            noise,
            offsets,
            zeta,
        })
    }

    /// One optimizer step on the encoder and projection head.
    pub fn standard_step(&mut self, inputs: &StepInputs) -> Result<Evaluation, TrainError> {
        let eval = evaluate(&self.store, &self.ccnn, &self.loss_settings(), inputs, NormMode::Train)?;
        let groups = [ParamGroup::Encoder, ParamGroup::Head];
        set_grads(&mut self.store, &eval.grads, &groups);
        self.inner.step(&mut self.store, &groups)?;
        update_running_stats(&mut self.store, &eval.stats);
        Ok(eval)
    }

    /// Standard stage: the scheduler is frozen. Logs `step loss lr eta` lines
    /// and returns the mean batch loss.
    pub fn train_epoch_standard(&mut self, data: &[PreparedGraph], epoch: usize, log: &mut dyn Write) -> Result<f64, TrainError> {
        let batches = make_batches(data.len(), self.cfg.batch_size, self.cfg.seed, epoch as u64)?;
        let zeta = self.zeta(epoch);
        let mut total = 0.0;
        for ids in &batches {
            let inputs = self.inputs(data, ids, self.step, zeta)?;
            let eval = self.standard_step(&inputs)?;
            writeln!(log, "{} {} {} {}", self.step, eval.loss, self.cfg.lr, self.cfg.eta)?;
            total += eval.loss;
            self.step += 1;
        }
        Ok(total / batches.len() as f64)
    }
}

/// Compares analytic and finite-difference gradients of the full objective
/// (encoder, head, scheduler with frozen Gumbel and perturbation draws) on a
/// batch of three random graphs drawn from `seed`. Every parameter is
/// redrawn from `N(0, 0.5)`.
pub fn pipeline_gradcheck(seed: u64, h: f64) -> Result<GradCheckReport, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_degree = 6;
    let data: Vec<PreparedGraph> = (0..3)
        .map(|_| {
            let n = rng.random_range(4..=7);
            let g = Graph::random(n, 0.6, &mut rng);
            let f = initial_node_features(&g, FeatureScheme::DegreeOneHot, max_degree, 0).expect("degree features");
            PreparedGraph::new(&g, &f, 6)
        })
        .collect::<Result<_, _>>()?;
    let cfg = TrainConfig {
        seed,
        num_layers: 2,
        hidden: 3,
        proj_dim: 8,
        normalization: false,
        zeta: 0.5,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&cfg, max_degree + 1)?;
    let normal = Normal::new(0.0, 0.5).expect("positive std");
    for (_, p) in trainer.store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
    }
    let inputs = trainer.inputs(&data, &[0, 1, 2], 0, cfg.zeta)?;
    let settings = trainer.loss_settings();
    let eval = evaluate(&trainer.store, &trainer.ccnn, &settings, &inputs, NormMode::Train)?;
    check_store_gradients(&trainer.store, &eval.grads, h, |st| {
        loss_only(st, &trainer.ccnn, &settings, &inputs, NormMode::Train)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_embeddings_give_log_three() {
        let z = Tensor::from_rows(&vec![vec![0.6, 0.8]; 4]).unwrap();
        let l = ntxent_value(&z, &z, 0.2, Denominator::ExcludePositive).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
        let l = ntxent_value(&z, &z, 0.2, Denominator::IncludePositive).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_pair_gives_negative_inverse_temperature() {
        let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let l = ntxent_value(&z, &z, 0.2, Denominator::ExcludePositive).unwrap();
        assert!((l + 5.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_inputs() {
        let one = Tensor::row(&[1.0, 0.0]);
        assert!(matches!(ntxent_value(&one, &one, 0.2, Denominator::ExcludePositive), Err(TrainError::TooFewSamples(1))));
        let bad = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        assert!(matches!(ntxent_value(&bad, &bad, 0.2, Denominator::ExcludePositive), Err(TrainError::NotUnit { row: 1, .. })));
    }

    #[test]
    fn perturbation_properties() {
        let mut s = ParameterStore::new();
        s.insert("a", ParamGroup::Encoder, Tensor::row(&[1.0, 2.0, 3.0])).unwrap();
        s.insert("c", ParamGroup::Encoder, Tensor::filled(2, 2, 4.0)).unwrap();
        s.insert("h", ParamGroup::Head, Tensor::row(&[1.0, -1.0])).unwrap();
        let before = s.checksum(&[ParamGroup::Encoder, ParamGroup::Head]);
        let zero = perturb_params(&s, 0.0, 1);
        assert_eq!(zero, s);
        let p = perturb_params(&s, 10.0, 1);
        assert_eq!(p.value("c").unwrap(), s.value("c").unwrap());
        assert_eq!(p.value("h").unwrap(), s.value("h").unwrap());
        assert_ne!(p.value("a").unwrap(), s.value("a").unwrap());
        assert_eq!(perturb_params(&s, 10.0, 1), p);
        assert_eq!(s.checksum(&[ParamGroup::Encoder, ParamGroup::Head]), before);
    }

    #[test]
    fn batches_cover_everything_without_singletons() {
        let b = make_batches(9, 4, 0, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
        assert!(make_batches(1, 4, 0, 0).is_err());
        assert_ne!(make_batches(50, 50, 0, 0).unwrap(), make_batches(50, 50, 0, 1).unwrap());
    }

    #[test]
    fn standard_epoch_leaves_scheduler_untouched() {
        let graphs = [Graph::complete(4), Graph::cycle(5), Graph::petersen(), Graph::cycle(3)];
        let data: Vec<PreparedGraph> = graphs
            .iter()
            .map(|g| {
                let f = crate::graph_io::initial_node_features(g, FeatureScheme::DegreeOneHot, 3, 0).unwrap();
                PreparedGraph::new(g, &f, 6).unwrap()
            })
            .collect();
        let cfg = TrainConfig {
            hidden: 4,
            num_layers: 2,
            proj_dim: 16,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(&cfg, 4).unwrap();
        let sched = t.store.checksum(&[ParamGroup::Scheduler]);
        let enc = t.store.checksum(&[ParamGroup::Encoder]);
        let mut log = Vec::new();
        let loss = t.train_epoch_standard(&data, 0, &mut log).unwrap();
        assert!(loss.is_finite());
        assert_eq!(t.store.checksum(&[ParamGroup::Scheduler]), sched);
        assert_ne!(t.store.checksum(&[ParamGroup::Encoder]), enc);
        let line = String::from_utf8(log).unwrap();
        assert_eq!(line.split_whitespace().count(), 4);
    }

    #[test]
    fn pipeline_gradients_match_finite_differences() {
        for seed in 0..3 {
            let r = pipeline_gradcheck(seed, 1e-5).unwrap();
            assert!(r.checked > 100, "{r:?}");
            assert!(r.max_rel_err < 1e-4, "{r:?}");
        }
    }
}
