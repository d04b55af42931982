//! Linear probes on frozen graph embeddings and the random-trimming study.

use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::ccnn::{encode, encode_trimmed, CcnnConfig, CcnnError, ComplexBatch, Encoder, NormMode, PreparedGraph};
use crate::config::TrainConfig;
use crate::diffcore::{ParameterStore, Tape, Tensor, TensorError};
use crate::trim_scheduler::{self, stream_seed, trim_logits, TrimError};

pub const SUBSET_ATTEMPTS: usize = 10;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("invalid probe config: {0}")]
    Config(String),
    #[error("class {class} has {count} samples, fewer than {folds} folds")]
    ClassTooSmall { class: usize, count: usize, folds: usize },
    #[error("labeled subset missed a class in {0} attempts")]
    MissingClass(usize),
    #[error("trim ratio {0} outside [0, 1]")]
    Ratio(f64),
    #[error("{embeddings} embeddings for {labels} labels")]
    Length { embeddings: usize, labels: usize },
    #[error(transparent)]
    Ccnn(#[from] CcnnError),
    #[error(transparent)]
    Trim(#[from] TrimError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub folds: usize,
    pub seeds: usize,
    pub reg: f64,
    pub epochs: usize,
    pub lr: f64,
    pub label_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            folds: 10,
            seeds: 5,
            reg: 1e-3,
            epochs: 200,
            lr: 0.1,
            label_fraction: 0.1,
        }
    }
}

impl ProbeConfig {
    pub fn from_train(cfg: &TrainConfig) -> Self {
        Self {
            folds: cfg.folds,
            seeds: cfg.probe_seeds,
            reg: cfg.probe_reg,
            epochs: cfg.probe_epochs,
            lr: cfg.probe_lr,
            label_fraction: cfg.label_fraction,
        }
    }

    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.folds < 2 {
            return Err(ProbeError::Config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if self.seeds == 0 {
            return Err(ProbeError::Config("seeds must be positive".into()));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(ProbeError::Config(format!("label fraction {} outside (0, 1]", self.label_fraction)));
        }
        if !(self.reg >= 0.0) || !(self.lr > 0.0) {
            return Err(ProbeError::Config("regularization must be >= 0 and lr > 0".into()));
        }
        Ok(())
    }
}

fn class_counts(labels: &[usize]) -> Vec<usize> {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut c = vec![0; k];
    for &l in labels {
        c[l] += 1;
    }
    c
}

/// Fold index of every sample. Members of each class are shuffled and dealt
/// round-robin, continuing the deal across classes so fold sizes stay level.
pub fn stratified_folds(labels: &[usize], folds: usize, seed: u64) -> Result<Vec<usize>, ProbeError> {
    if folds < 2 {
        return Err(ProbeError::Config(format!("folds must be at least 2, got {folds}")));
    }
    let counts = class_counts(labels);
    for (class, &count) in counts.iter().enumerate() {
        if count > 0 && count < folds {
            return Err(ProbeError::ClassTooSmall { class, count, folds });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0; labels.len()];
    let mut next = 0;
    for class in 0..counts.len() {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        for m in members {
            out[m] = next % folds;
            next += 1;
        }
    }
    Ok(out)
}

/// Per-dimension affine map to zero mean and unit variance on the fitted rows.
#[derive(Clone, Debug)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Tensor, rows: &[usize]) -> Self {
        let d = x.cols();
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for &r in rows {
            for (m, v) in mean.iter_mut().zip(x.row_slice(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for &r in rows {
            for ((s, v), m) in var.iter_mut().zip(x.row_slice(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 { 1.0 / sd } else { 1.0 }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) * s).collect()
    }
}

/// One-vs-rest linear classifier with L2-regularized hinge loss.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl LinearProbe {
    /// Full-batch subgradient descent from zero on
    /// `mean(max(0, 1 - y (w.x + b))) + reg/2 |w|^2`.
    pub fn fit(x: &[Vec<f64>], y: &[usize], num_classes: usize, cfg: &ProbeConfig) -> Self {
        let d = x.first().map_or(0, Vec::len);
        let n = x.len().max(1) as f64;
        let mut weights = vec![vec![0.0; d]; num_classes];
        let mut bias = vec![0.0; num_classes];
        for c in 0..num_classes {
            let w = &mut weights[c];
            let b = &mut bias[c];
            let mut gw = vec![0.0; d];
            for _ in 0..cfg.epochs {
                for (g, wv) in gw.iter_mut().zip(w.iter()) {
                    *g = cfg.reg * wv;
                }
                let mut gb = 0.0;
                for (xi, &yi) in x.iter().zip(y) {
                    let s = if yi == c { 1.0 } else { -1.0 };
                    let score: f64 = xi.iter().zip(w.iter()).map(|(a, b)| a * b).sum::<f64>() + *b;
                    if s * score < 1.0 {
                        for (g, v) in gw.iter_mut().zip(xi) {
                            *g -= s * v / n;
                        }
                        gb -= s / n;
                    }
                }
                for (wv, g) in w.iter_mut().zip(&gw) {
                    *wv -= cfg.lr * g;
                }
                *b -= cfg.lr * gb;
            }
        }
        Self { weights, bias }
    }

    /// Highest-scoring class; ties go to the smaller index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (c, (w, b)) in self.weights.iter().zip(&self.bias).enumerate() {
            let s: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + b;
            if s > best.1 {
                best = (c, s);
            }
        }
        best.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldRecord {
    pub seed: u64,
    pub fold: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub mean: f64,
    /// Population standard deviation over all seed x fold records.
    pub std: f64,
    pub records: Vec<FoldRecord>,
}

impl ProbeReport {
    fn from_records(records: Vec<FoldRecord>) -> Self {
        let n = records.len().max(1) as f64;
        let mean = records.iter().map(|r| r.accuracy).sum::<f64>() / n;
        let var = records.iter().map(|r| (r.accuracy - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            records,
        }
    }
}

fn fit_and_score(
    x: &Tensor,
    scaler: &Standardizer,
    train: &[(usize, usize)],
    test: &[usize],
    labels: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> (LinearProbe, f64) {
    let xs: Vec<Vec<f64>> = train.iter().map(|&(i, _)| scaler.apply(x.row_slice(i))).collect();
    let ys: Vec<usize> = train.iter().map(|&(_, y)| y).collect();
    let probe = LinearProbe::fit(&xs, &ys, num_classes, cfg);
    let correct = test.iter().filter(|&&i| probe.predict(&scaler.apply(x.row_slice(i))) == labels[i]).count();
    (probe, correct as f64 / test.len().max(1) as f64)
}

fn cross_validate<F>(x: &Tensor, labels: &[usize], cfg: &ProbeConfig, seed: u64, per_fold: F) -> Result<ProbeReport, ProbeError>
where
    F: Fn(&[usize], &[usize], u64) -> Result<f64, ProbeError> + Sync,
{
    cfg.validate()?;
    if x.rows() != labels.len() {
        return Err(ProbeError::Length {
            embeddings: x.rows(),
            labels: labels.len(),
        });
    }
    let mut tasks = Vec::new();
    for s in 0..cfg.seeds as u64 {
        let fold_seed = seed.wrapping_add(s);
        let assign = stratified_folds(labels, cfg.folds, fold_seed)?;
        for f in 0..cfg.folds {
            let train: Vec<usize> = (0..labels.len()).filter(|&i| assign[i] != f).collect();
            let test: Vec<usize> = (0..labels.len()).filter(|&i| assign[i] == f).collect();
            tasks.push((fold_seed, f, train, test));
        }
    }
    let records = tasks
        .par_iter()
        .map(|(s, f, train, test)| {
            Ok(FoldRecord {
                seed: *s,
                fold: *f,
                accuracy: per_fold(train, test, stream_seed(*s, *f, 0))?,
            })
        })
        .collect::<Result<Vec<_>, ProbeError>>()?;
    Ok(ProbeReport::from_records(records))
}

/// Stratified k-fold accuracy of the linear probe, repeated over `cfg.seeds`
/// fold shuffles starting at `seed`.
pub fn linear_probe_cv(x: &Tensor, labels: &[usize], cfg: &ProbeConfig, seed: u64) -> Result<ProbeReport, ProbeError> {
    let k = class_counts(labels).len();
    cross_validate(x, labels, cfg, seed, |train, test, _| {
        let scaler = Standardizer::fit(x, train);
        let pairs: Vec<(usize, usize)> = train.iter().map(|&i| (i, labels[i])).collect();
        Ok(fit_and_score(x, &scaler, &pairs, test, labels, k, cfg).1)
    })
}

/// Per-class quotas summing to `ceil(fraction * n)`; leftover slots go to
/// classes in random order.
fn labeled_subset(train: &[usize], labels: &[usize], fraction: f64, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
    let k = class_counts(labels).len();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for &i in train {
        members[labels[i]].push(i);
    }
    let target = ((fraction * train.len() as f64).ceil() as usize).min(train.len());
    let mut quota: Vec<usize> = members.iter().map(|m| (fraction * m.len() as f64).floor() as usize).collect();
    let mut order: Vec<usize> = (0..k).filter(|&c| !members[c].is_empty()).collect();
    order.shuffle(rng);
    let mut left = target.saturating_sub(quota.iter().sum());
    for &c in order.iter().cycle().take(order.len() * 2) {
        if left == 0 {
            break;
        }
        if quota[c] < members[c].len() {
            quota[c] += 1;
            left -= 1;
        }
    }
    if (0..k).any(|c| !members[c].is_empty() && quota[c] == 0) {
        return None;
    }
    let mut out = Vec::with_capacity(target);
    for (c, m) in members.iter_mut().enumerate() {
        m.shuffle(rng);
        out.extend_from_slice(&m[..quota[c]]);
    }
    out.sort_unstable();
    Some(out)
}

/// Pseudo-labeling protocol: fit on a labeled fraction of each training fold,
/// label the rest with that probe, refit on the union, score the held-out fold.
pub fn semi_supervised_probe(x: &Tensor, labels: &[usize], cfg: &ProbeConfig, seed: u64) -> Result<ProbeReport, ProbeError> {
    let k = class_counts(labels).len();
    cross_validate(x, labels, cfg, seed, |train, test, task_seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(task_seed);
        let mut labeled = None;
        for attempt in 0..SUBSET_ATTEMPTS {
            labeled = labeled_subset(train, labels, cfg.label_fraction, &mut rng);
            if labeled.is_some() {
                break;
            }
            log::warn!("labeled subset missed a class, resampling (attempt {})", attempt + 1);
        }
        let labeled = labeled.ok_or(ProbeError::MissingClass(SUBSET_ATTEMPTS))?;
        let scaler = Standardizer::fit(x, train);
        let pairs: Vec<(usize, usize)> = labeled.iter().map(|&i| (i, labels[i])).collect();
        if labeled.len() == train.len() {
            return Ok(fit_and_score(x, &scaler, &pairs, test, labels, k, cfg).1);
        }
        let (first, _) = fit_and_score(x, &scaler, &pairs, &[], labels, k, cfg);
        let union: Vec<(usize, usize)> = train
            .iter()
            .map(|&i| {
                if labeled.binary_search(&i).is_ok() {
                    (i, labels[i])
                } else {
                    (i, first.predict(&scaler.apply(x.row_slice(i))))
                }
            })
            .collect();
        Ok(fit_and_score(x, &scaler, &union, test, labels, k, cfg).1)
    })
}

/// Eval-mode retain probabilities `lambda[:, 1]` of every 2-cell of the batch.
pub fn retain_probabilities(store: &ParameterStore, cfg: &CcnnConfig, batch: &ComplexBatch) -> Result<Vec<f64>, ProbeError> {
    if batch.counts[2] == 0 {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let bindings = store.bind(&mut tape);
    let mut enc = Encoder::new(cfg, store, &bindings, NormMode::Eval);
    let states = enc.message_passing(&mut tape, batch)?;
    let lambda = trim_logits(&mut tape, &bindings, states.jump[2])?;
    let v = tape.value(lambda);
    Ok((0..v.rows()).map(|r| v.get(r, 1)).collect())
}

/// Readout weights used when embedding a dataset.
#[derive(Clone, Debug)]
pub enum ReadoutMask {
    Full,
    /// The scheduler's retain probabilities; falls back to `Full` without a scheduler.
    Scheduler,
    /// One weight vector per graph, aligned with its 2-cells.
    PerGraph(Vec<Vec<f64>>),
}

/// Eval-mode `H_X` for every graph, row `i` for `data[i]`. Rows do not depend
/// on `chunk` since eval-mode encoding is per graph.
pub fn embed_dataset(
    store: &ParameterStore,
    cfg: &CcnnConfig,
    data: &[PreparedGraph],
    mask: &ReadoutMask,
    chunk: usize,
) -> Result<Tensor, ProbeError> {
    let chunk = chunk.max(1);
    let starts: Vec<usize> = (0..data.len()).step_by(chunk).collect();
    let has_sched = store.get(trim_scheduler::WEIGHT).is_some();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let items: Vec<&PreparedGraph> = data[s..(s + chunk).min(data.len())].iter().collect();
            let batch = ComplexBatch::new(&items)?;
            let h = match mask {
                ReadoutMask::Full => encode(store, cfg, &batch)?,
                ReadoutMask::Scheduler if !has_sched => encode(store, cfg, &batch)?,
                ReadoutMask::Scheduler => {
                    let m = retain_probabilities(store, cfg, &batch)?;
                    encode_trimmed(store, cfg, &batch, &m)?
                }
                ReadoutMask::PerGraph(masks) => {
                    let m: Vec<f64> = (s..s + items.len()).flat_map(|i| masks[i].iter().copied()).collect();
                    encode_trimmed(store, cfg, &batch, &m)?
                }
            };
            Ok(h)
        })
        .collect::<Result<Vec<Tensor>, ProbeError>>()?;
    let d = cfg.jump_width();
    let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
    Ok(Tensor::matrix(data.len() / d.max(1), d, data)?)
}

/// Ones with a uniformly random `floor(ratio * n)`-subset set to zero.
pub fn random_trim_mask(n: usize, ratio: f64, seed: u64) -> Result<Vec<f64>, ProbeError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(ProbeError::Ratio(ratio));
    }
    let k = ((ratio * n as f64).floor() as usize).min(n);
    let mut m = vec![1.0; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in index::sample(&mut rng, n, k) {
        m[i] = 0.0;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyRow {
    pub ratio: f64,
    pub trial: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyResult {
    /// Probe accuracy with every 2-cell kept.
    pub baseline: f64,
    /// Probe accuracy with every 2-cell removed from the readout.
    pub skeleton: f64,
    pub rows: Vec<StudyRow>,
}

/// Random trimming of 2-cell readout contributions on a fixed encoder; every
/// probe run uses the same fold seed so only the masks vary.
#[allow(clippy::too_many_arguments)]
pub fn random_trim_study(
    store: &ParameterStore,
    ccnn: &CcnnConfig,
    data: &[PreparedGraph],
    labels: &[usize],
    ratios: &[f64],
    trials: usize,
    cfg: &ProbeConfig,
    seed: u64,
    chunk: usize,
) -> Result<StudyResult, ProbeError> {
    if let Some(&r) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(ProbeError::Ratio(r));
    }
    let score = |masks: Vec<Vec<f64>>| -> Result<f64, ProbeError> {
        let x = embed_dataset(store, ccnn, data, &ReadoutMask::PerGraph(masks), chunk)?;
        Ok(linear_probe_cv(&x, labels, cfg, seed)?.mean)
    };
    let full = |v: f64| data.iter().map(|g| vec![v; g.num_two_cells()]).collect::<Vec<_>>();
    let baseline = score(full(1.0))?;
    let skeleton = score(full(0.0))?;
    let mut rows = Vec::with_capacity(ratios.len() * trials);
    for (ri, &ratio) in ratios.iter().enumerate() {
        for trial in 0..trials {
            let round = (ri * trials + trial) as u64;
            let masks = data
                .iter()
                .enumerate()
                .map(|(g, p)| random_trim_mask(p.num_two_cells(), ratio, stream_seed(seed, g, round)))
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(StudyRow {
                ratio,
                trial,
                accuracy: score(masks)?,
            });
        }
    }
    Ok(StudyResult { baseline, skeleton, rows })
}

pub fn format_probe_tsv(dataset: &str, protocol: &str, report: &ProbeReport) -> String {
    let mut s = String::from("dataset\tprotocol\tseed\tfold\taccuracy\n");
    for r in &report.records {
        writeln!(s, "{dataset}\t{protocol}\t{}\t{}\t{}", r.seed, r.fold, r.accuracy).unwrap();
    }
    s
}

pub fn format_study_tsv(result: &StudyResult) -> String {
    let mut s = String::from("ratio\ttrial\taccuracy\tbaseline\n");
    for r in &result.rows {
        writeln!(s, "{}\t{}\t{}\t{}", r.ratio, r.trial, r.accuracy, result.baseline).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn clouds(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let c = if y == 0 { -1.0 } else { 1.0 };
            data.extend([c + noise.sample(&mut rng), 0.5 * c + noise.sample(&mut rng), 0.0]);
            labels.push(y);
        }
        (Tensor::matrix(n, 3, data).unwrap(), labels)
    }

    #[test]
    fn separable_clouds_are_probed_perfectly() {
        let (x, y) = clouds(60, 1);
        let cfg = ProbeConfig { seeds: 2, ..ProbeConfig::default() };
        assert_eq!(linear_probe_cv(&x, &y, &cfg, 0).unwrap().mean, 1.0);
        assert_eq!(semi_supervised_probe(&x, &y, &cfg, 0).unwrap().mean, 1.0);
    }

    #[test]
    fn full_label_fraction_matches_supervised() {
        let (x, mut y) = clouds(40, 2);
        y.swap(0, 1);
        y.swap(5, 8);
        let cfg = ProbeConfig {
            seeds: 2,
            label_fraction: 1.0,
            ..ProbeConfig::default()
        };
        assert_eq!(linear_probe_cv(&x, &y, &cfg, 3).unwrap(), semi_supervised_probe(&x, &y, &cfg, 3).unwrap());
    }

    #[test]
    fn folds_are_stratified_and_deterministic() {
        let labels: Vec<usize> = (0..103).map(|i| (i * 7 % 11) % 3).collect();
        let a = stratified_folds(&labels, 10, 5).unwrap();
        assert_eq!(a, stratified_folds(&labels, 10, 5).unwrap());
        let counts = class_counts(&labels);
        for f in 0..10 {
            for (c, &total) in counts.iter().enumerate() {
                let in_fold = (0..labels.len()).filter(|&i| a[i] == f && labels[i] == c).count() as f64;
                assert!((in_fold - total as f64 / 10.0).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn small_classes_are_rejected() {
        let labels = vec![0, 0, 0, 1, 1, 0, 0];
        assert!(matches!(stratified_folds(&labels, 3, 0), Err(ProbeError::ClassTooSmall { class: 1, count: 2, folds: 3 })));
        let cfg = ProbeConfig { folds: 1, ..ProbeConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = ProbeConfig { label_fraction: 0.0, ..ProbeConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn trim_masks() {
        assert_eq!(random_trim_mask(5, 0.0, 1).unwrap(), vec![1.0; 5]);
        assert_eq!(random_trim_mask(5, 1.0, 1).unwrap(), vec![0.0; 5]);
        let m = random_trim_mask(10, 0.35, 4).unwrap();
        assert_eq!(m.iter().filter(|&&v| v == 0.0).count(), 3);
        assert!(matches!(random_trim_mask(3, 1.5, 0), Err(ProbeError::Ratio(_))));
    }

    #[test]
    fn labeled_subset_covers_classes() {
        let labels: Vec<usize> = (0..50).map(|i| usize::from(i < 10)).collect();
        let train: Vec<usize> = (0..50).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = labeled_subset(&train, &labels, 0.1, &mut rng).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s.iter().filter(|&&i| labels[i] == 1).count(), 1);
        let sparse: Vec<usize> = (0..50).map(|i| usize::from(i < 2)).collect();
        assert!(labeled_subset(&train, &sparse, 0.02, &mut rng).is_none());
    }
}
