//! Scheduler updates through a one-step lookahead of the encoder and head.
//!
//! With `w = (theta, phi)` and scheduler parameters `u`, the lookahead is
//! `w_hat = w - (alpha * g_theta, beta * g_phi)` and the scheduler follows the
//! derivative of `L(w_hat(u), u)`. First-order mode keeps only the direct term
//! `dL/du` at `w_hat`. Second-order mode subtracts the mixed term
//! `(alpha H_u,theta v_theta + beta H_u,phi v_phi)`, where `v` is the gradient
//! at `w_hat`, estimated by central differences of `dL/du` at `w +/- eps (alpha v_theta, beta v_phi)`.

use std::collections::BTreeMap;
use std::io::Write;

use crate::ccnn::{NormMode, PreparedGraph};
use crate::config::BilevelMode;
use crate::contrastive::{evaluate, make_batches, set_grads, StepInputs, TrainError, Trainer};
use crate::diffcore::{ParamGroup, ParameterStore, Tensor, TensorError};

pub const FD_SCALE: f64 = 0.01;
pub const DEGENERATE_NORM: f64 = 1e-12;

/// A loss with gradients for every parameter of a store.
pub trait Objective {
    type Error: From<TensorError>;
    fn loss_and_grads(&mut self, store: &ParameterStore) -> Result<(f64, BTreeMap<String, Tensor>), Self::Error>;
}

/// Inner learning rates per parameter group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnerRates {
    pub alpha: f64,
    pub beta: f64,
}

impl InnerRates {
    fn rate(&self, group: ParamGroup) -> Option<f64> {
        match group {
            ParamGroup::Encoder => Some(self.alpha),
            ParamGroup::Head => Some(self.beta),
            ParamGroup::Scheduler => None,
        }
    }
}

/// Moves encoder and head parameters along `direction` scaled by their group
/// rate times `k`; zero rates leave tensors bit-identical.
fn shifted_store(store: &ParameterStore, direction: &BTreeMap<String, Tensor>, rates: InnerRates, k: f64) -> ParameterStore {
    let mut out = store.clone();
    for (name, p) in out.iter_mut() {
        let Some(rate) = rates.rate(p.group) else { continue };
        if rate == 0.0 || k == 0.0 {
            continue;
        }
        if let Some(d) = direction.get(name) {
            p.value.axpy(k * rate, d);
        }
    }
    out
}

/// `theta - alpha grad_theta`, `phi - beta grad_phi`; the scheduler and the
/// input store are unchanged.
pub fn lookahead_step(store: &ParameterStore, grads: &BTreeMap<String, Tensor>, rates: InnerRates) -> ParameterStore {
    shifted_store(store, grads, rates, -1.0)
}

fn scheduler_grads(store: &ParameterStore, grads: &BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
    store
        .iter()
        .filter(|(_, p)| p.group == ParamGroup::Scheduler)
        .map(|(n, p)| (n.clone(), grads.get(n).cloned().unwrap_or_else(|| p.value.zeros_like())))
        .collect()
}

#[derive(Clone, Debug)]
pub struct Hypergradient {
    pub grads: BTreeMap<String, Tensor>,
    /// Loss at the pre-lookahead point.
    pub inner_loss: f64,
    /// Loss at the lookahead point.
    pub outer_loss: f64,
    /// Mode actually used (second-order falls back when the lookahead gradient vanishes).
    pub mode: BilevelMode,
}

/// Scheduler gradient of the post-lookahead loss, starting from `store` (the
/// pre-lookahead point).
pub fn hypergradient<O: Objective>(
    obj: &mut O,
    store: &ParameterStore,
    rates: InnerRates,
    mode: BilevelMode,
) -> Result<Hypergradient, O::Error> {
    let (inner_loss, g) = obj.loss_and_grads(store)?;
    let hat = lookahead_step(store, &g, rates);
    let (outer_loss, g_hat) = obj.loss_and_grads(&hat)?;
    let mut grads = scheduler_grads(store, &g_hat);
    if mode == BilevelMode::FirstOrder {
        return Ok(Hypergradient {
            grads,
            inner_loss,
            outer_loss,
            mode,
        });
    }
    let v: BTreeMap<String, Tensor> = store
        .iter()
        .filter(|(_, p)| rates.rate(p.group).is_some())
        .filter_map(|(n, _)| g_hat.get(n).map(|t| (n.clone(), t.clone())))
        .collect();
    let norm = v.values().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm < DEGENERATE_NORM {
        log::warn!("lookahead gradient norm {norm:e} too small, using the first-order hypergradient");
        return Ok(Hypergradient {
            grads,
            inner_loss,
            outer_loss,
            mode: BilevelMode::FirstOrder,
        });
    }
    let eps = FD_SCALE / norm;
    let plus = shifted_store(store, &v, rates, eps);
    let minus = shifted_store(store, &v, rates, -eps);
    let (_, g_plus) = obj.loss_and_grads(&plus)?;
    let (_, g_minus) = obj.loss_and_grads(&minus)?;
    let gp = scheduler_grads(store, &g_plus);
    let gm = scheduler_grads(store, &g_minus);
    for (name, h) in grads.iter_mut() {
        let mut mixed = gp[name].clone();
        mixed.axpy(-1.0, &gm[name]);
        h.axpy(-1.0 / (2.0 * eps), &mixed);
    }
    Ok(Hypergradient {
        grads,
        inner_loss,
        outer_loss,
        mode,
    })
}

/// `L = (theta - upsilon)^2` with scalar `theta` (encoder) and `upsilon` (scheduler).
pub struct ScalarToy;

impl ScalarToy {
    pub fn store(theta: f64, upsilon: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("theta", ParamGroup::Encoder, Tensor::scalar(theta)).expect("fresh store");
        s.insert("upsilon", ParamGroup::Scheduler, Tensor::scalar(upsilon)).expect("fresh store");
        s
    }

    /// `d/du L(theta_hat(u), u) = -2 (1 - 2 alpha)^2 (theta - u)`.
    pub fn exact(theta: f64, upsilon: f64, alpha: f64) -> f64 {
        -2.0 * (1.0 - 2.0 * alpha).powi(2) * (theta - upsilon)
    }

    /// `-2 (1 - 2 alpha) (theta - u)`.
    pub fn first_order(theta: f64, upsilon: f64, alpha: f64) -> f64 {
        -2.0 * (1.0 - 2.0 * alpha) * (theta - upsilon)
    }
}

impl Objective for ScalarToy {
    type Error = TensorError;
    fn loss_and_grads(&mut self, store: &ParameterStore) -> Result<(f64, BTreeMap<String, Tensor>), TensorError> {
        let t = store.value("theta")?.item();
        let u = store.value("upsilon")?.item();
        let mut g = BTreeMap::new();
        g.insert("theta".to_string(), Tensor::scalar(2.0 * (t - u)));
        g.insert("upsilon".to_string(), Tensor::scalar(-2.0 * (t - u)));
        Ok(((t - u).powi(2), g))
    }
}

/// The contrastive objective on one frozen batch.
pub struct PipelineObjective<'a> {
    pub trainer: &'a Trainer,
    pub inputs: &'a StepInputs,
    /// Mean retain weight of every evaluation, in call order.
    pub retains: Vec<f64>,
}

impl Objective for PipelineObjective<'_> {
    type Error = TrainError;
    fn loss_and_grads(&mut self, store: &ParameterStore) -> Result<(f64, BTreeMap<String, Tensor>), TrainError> {
        let e = evaluate(store, &self.trainer.ccnn, &self.trainer.loss_settings(), self.inputs, NormMode::Train)?;
        self.retains.push(e.mean_retain);
        Ok((e.loss, e.grads))
    }
}

/// Stage two: scheduler updates only. Logs
/// `epoch stage batch inner_loss outer_loss mean_retain` per batch.
pub fn train_epoch_meta(trainer: &mut Trainer, data: &[PreparedGraph], epoch: usize, log: &mut dyn Write) -> Result<f64, TrainError> {
    let batches = make_batches(data.len(), trainer.cfg.batch_size, trainer.cfg.seed, epoch as u64)?;
    let zeta = trainer.zeta(epoch);
    let rates = InnerRates {
        alpha: trainer.cfg.alpha,
        beta: trainer.cfg.beta,
    };
    let mut total = 0.0;
    for (b, ids) in batches.iter().enumerate() {
        let inputs = trainer.inputs(data, ids, trainer.step, zeta)?;
        let mut obj = PipelineObjective {
            trainer,
            inputs: &inputs,
            retains: Vec::new(),
        };
        let hyper = hypergradient(&mut obj, &trainer.store, rates, trainer.cfg.bilevel_mode)?;
        let retain = obj.retains[0];
        let groups = [ParamGroup::Scheduler];
        set_grads(&mut trainer.store, &hyper.grads, &groups);
        trainer.outer.step(&mut trainer.store, &groups)?;
        writeln!(
            log,
            "{epoch} meta {b} {} {} {}",
            hyper.inner_loss, hyper.outer_loss, retain
        )?;
        total += hyper.outer_loss;
        trainer.step += 1;
    }
    Ok(total / batches.len() as f64)
}

/// Alternates a full standard epoch with a full meta epoch (when enabled).
pub fn alternating_train(
    trainer: &mut Trainer,
    data: &[PreparedGraph],
    epochs: usize,
    train_log: &mut dyn Write,
    meta_log: &mut dyn Write,
) -> Result<(), TrainError> {
    for epoch in 0..epochs {
        let loss = trainer.train_epoch_standard(data, epoch, train_log)?;
        writeln!(meta_log, "{epoch} standard - {loss} - -")?;
        if trainer.cfg.bilevel && trainer.cfg.trimming {
            train_epoch_meta(trainer, data, epoch, meta_log)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(theta: f64, upsilon: f64, alpha: f64, mode: BilevelMode) -> f64 {
        let store = ScalarToy::store(theta, upsilon);
        let h = hypergradient(&mut ScalarToy, &store, InnerRates { alpha, beta: alpha }, mode).unwrap();
        h.grads["upsilon"].item()
    }

    #[test]
    fn toy_matches_closed_forms() {
        for &(t, u, a) in &[(1.5, -0.3, 0.1), (-2.0, 0.7, 0.35), (0.2, 0.1, 0.01)] {
            assert!((toy(t, u, a, BilevelMode::SecondOrder) - ScalarToy::exact(t, u, a)).abs() < 1e-5);
            assert!((toy(t, u, a, BilevelMode::FirstOrder) - ScalarToy::first_order(t, u, a)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_rate_collapses_modes() {
        let a = toy(1.3, -0.4, 0.0, BilevelMode::SecondOrder);
        let b = toy(1.3, -0.4, 0.0, BilevelMode::FirstOrder);
        assert_eq!(a, b);
    }

    #[test]
    fn lookahead_with_zero_rates_is_identity() {
        let s = ScalarToy::store(-0.0, 2.0);
        let (_, g) = ScalarToy.loss_and_grads(&s).unwrap();
        let hat = lookahead_step(&s, &g, InnerRates { alpha: 0.0, beta: 0.0 });
        assert_eq!(hat.value("theta").unwrap().item().to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn degenerate_point_falls_back() {
        let store = ScalarToy::store(1.0, 1.0);
        let h = hypergradient(&mut ScalarToy, &store, InnerRates { alpha: 0.1, beta: 0.1 }, BilevelMode::SecondOrder).unwrap();
        assert_eq!(h.mode, BilevelMode::FirstOrder);
        assert_eq!(h.grads["upsilon"].item(), 0.0);
    }

    #[test]
    fn meta_epoch_moves_only_the_scheduler() {
        use crate::config::TrainConfig;
        use crate::graph_io::{initial_node_features, FeatureScheme, Graph};
        let graphs = [Graph::complete(4), Graph::cycle(5), Graph::petersen(), Graph::cycle(3)];
        let data: Vec<PreparedGraph> = graphs
            .iter()
            .map(|g| PreparedGraph::new(g, &initial_node_features(g, FeatureScheme::DegreeOneHot, 3, 0).unwrap(), 6).unwrap())
            .collect();
        let cfg = TrainConfig {
            hidden: 4,
            num_layers: 2,
            proj_dim: 16,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(&cfg, 4).unwrap();
        let inner = [ParamGroup::Encoder, ParamGroup::Head];
        let before = t.store.checksum(&inner);
        let sched = t.store.checksum(&[ParamGroup::Scheduler]);
        let mut log = Vec::new();
        train_epoch_meta(&mut t, &data, 0, &mut log).unwrap();
        assert_eq!(t.store.checksum(&inner), before);
        assert_ne!(t.store.checksum(&[ParamGroup::Scheduler]), sched);
        let text = String::from_utf8(log).unwrap();
        let fields: Vec<&str> = text.split_whitespace().collect();
        assert_eq!(fields.len(), 6);
        assert_eq!(fields[1], "meta");
        let r: f64 = fields[5].parse().unwrap();
        assert!(r > 0.0 && r < 1.0);
    }
}
