//! Run configuration as plain `key=value` text.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::ccnn::CcnnConfig;
use crate::graph_io::FeatureScheme;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {reason}")]
    Value { key: String, value: String, reason: String },
}

/// Which denominator the contrastive loss uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Denominator {
    /// Sum over the other `N - 1` augmented views only.
    ExcludePositive,
    /// Sum over all `N` augmented views, positive included.
    IncludePositive,
}

impl FromStr for Denominator {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "exclude-positive" => Ok(Self::ExcludePositive),
            "include-positive" => Ok(Self::IncludePositive),
            o => Err(format!("expected exclude-positive or include-positive, got {o:?}")),
        }
    }
}

impl fmt::Display for Denominator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ExcludePositive => "exclude-positive",
            Self::IncludePositive => "include-positive",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BilevelMode {
    FirstOrder,
    SecondOrder,
}

impl FromStr for BilevelMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "first-order" => Ok(Self::FirstOrder),
            "second-order" => Ok(Self::SecondOrder),
            o => Err(format!("expected first-order or second-order, got {o:?}")),
        }
    }
}

impl fmt::Display for BilevelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FirstOrder => "first-order",
            Self::SecondOrder => "second-order",
        })
    }
}

/// Node feature choice; `Auto` picks label one-hot when labels exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureChoice {
    Auto,
    Fixed(FeatureScheme),
}

impl FromStr for FeatureChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "auto" {
            Ok(Self::Auto)
        } else {
            s.parse().map(Self::Fixed)
        }
    }
}

impl fmt::Display for FeatureChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Auto => "auto",
            Self::Fixed(FeatureScheme::LabelOneHot) => "label-onehot",
            Self::Fixed(FeatureScheme::DegreeOneHot) => "degree-onehot",
            Self::Fixed(FeatureScheme::Constant) => "constant",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub ring_size: usize,
    pub features: FeatureChoice,
    pub num_layers: usize,
    pub hidden: usize,
    pub proj_layers: usize,
    pub proj_dim: usize,
    pub normalization: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eta: f64,
    pub rho: f64,
    pub denominator: Denominator,
    pub symmetric: bool,
    pub trimming: bool,
    pub zeta: f64,
    pub zeta_end: f64,
    pub zeta_anneal: bool,
    pub bilevel: bool,
    pub bilevel_mode: BilevelMode,
    pub alpha: f64,
    pub beta: f64,
    pub outer_lr: f64,
    pub folds: usize,
    pub probe_seeds: usize,
    pub probe_reg: f64,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub label_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            ring_size: 6,
            features: FeatureChoice::Auto,
            num_layers: 3,
            hidden: 32,
            proj_layers: 2,
            proj_dim: 96,
            normalization: true,
            epochs: 20,
            batch_size: 128,
            lr: 0.001,
            eta: 1.0,
            rho: 0.2,
            denominator: Denominator::ExcludePositive,
            symmetric: false,
            trimming: true,
            zeta: 1.0,
            zeta_end: 0.1,
            zeta_anneal: false,
            bilevel: true,
            bilevel_mode: BilevelMode::SecondOrder,
            alpha: 0.001,
            beta: 0.001,
            outer_lr: 0.001,
            folds: 10,
            probe_seeds: 5,
            probe_reg: 1e-3,
            probe_epochs: 200,
            probe_lr: 0.1,
            label_fraction: 0.1,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

impl TrainConfig {
    pub fn ccnn(&self, in_dim: usize) -> CcnnConfig {
        CcnnConfig {
            in_dim,
            num_layers: self.num_layers,
            hidden: self.hidden,
            proj_layers: self.proj_layers,
            proj_dim: self.proj_dim,
            normalization: self.normalization,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse_value(key, v)?,
            "ring_size" => self.ring_size = parse_value(key, v)?,
            "features" => self.features = parse_value(key, v)?,
            "num_layers" => self.num_layers = parse_value(key, v)?,
            "hidden" => self.hidden = parse_value(key, v)?,
            "proj_layers" => self.proj_layers = parse_value(key, v)?,
            "proj_dim" => self.proj_dim = parse_value(key, v)?,
            "normalization" => self.normalization = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "eta" => self.eta = parse_value(key, v)?,
            "rho" => self.rho = parse_value(key, v)?,
            "denominator" => self.denominator = parse_value(key, v)?,
            "symmetric" => self.symmetric = parse_value(key, v)?,
            "trimming" => self.trimming = parse_value(key, v)?,
            "zeta" => self.zeta = parse_value(key, v)?,
            "zeta_end" => self.zeta_end = parse_value(key, v)?,
            "zeta_anneal" => self.zeta_anneal = parse_value(key, v)?,
            "bilevel" => self.bilevel = parse_value(key, v)?,
            "bilevel_mode" => self.bilevel_mode = parse_value(key, v)?,
            "alpha" => self.alpha = parse_value(key, v)?,
            "beta" => self.beta = parse_value(key, v)?,
            "outer_lr" => self.outer_lr = parse_value(key, v)?,
            "folds" => self.folds = parse_value(key, v)?,
            "probe_seeds" => self.probe_seeds = parse_value(key, v)?,
            "probe_reg" => self.probe_reg = parse_value(key, v)?,
            "probe_epochs" => self.probe_epochs = parse_value(key, v)?,
            "probe_lr" => self.probe_lr = parse_value(key, v)?,
            "label_fraction" => self.label_fraction = parse_value(key, v)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.apply_override(line).map_err(|e| match e {
                ConfigError::Syntax { text, .. } => ConfigError::Syntax { line: i + 1, text },
                e => e,
            })?;
        }
        Ok(())
    }

    pub fn apply_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (k, v) = kv.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            text: kv.to_string(),
        })?;
        self.set(k, v)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, value: String, reason: &str| {
            Err(ConfigError::Value {
                key: key.into(),
                value,
                reason: reason.into(),
            })
        };
        if self.ring_size < 3 {
            return bad("ring_size", self.ring_size.to_string(), "must be at least 3");
        }
        if self.num_layers == 0 || self.hidden == 0 || self.proj_dim == 0 || self.proj_layers == 0 {
            return bad("num_layers/hidden/proj", String::new(), "must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size", self.batch_size.to_string(), "must be at least 2");
        }
        if !(self.rho > 0.0) {
            return bad("rho", self.rho.to_string(), "must be positive");
        }
        if !(self.eta >= 0.0) {
            return bad("eta", self.eta.to_string(), "must be nonnegative");
        }
        if !(self.zeta > 0.0) || !(self.zeta_end > 0.0) {
            return bad("zeta", self.zeta.to_string(), "must be positive");
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return bad("alpha/beta", format!("{}/{}", self.alpha, self.beta), "must be nonnegative");
        }
        if self.folds < 2 {
            return bad("folds", self.folds.to_string(), "must be at least 2");
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return bad("label_fraction", self.label_fraction.to_string(), "must lie in (0, 1]");
        }
        Ok(())
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed={}", self.seed)?;
        writeln!(f, "ring_size={}", self.ring_size)?;
        writeln!(f, "features={}", self.features)?;
        writeln!(f, "num_layers={}", self.num_layers)?;
        writeln!(f, "hidden={}", self.hidden)?;
        writeln!(f, "proj_layers={}", self.proj_layers)?;
        writeln!(f, "proj_dim={}", self.proj_dim)?;
        writeln!(f, "normalization={}", self.normalization)?;
        writeln!(f, "epochs={}", self.epochs)?;
        writeln!(f, "batch_size={}", self.batch_size)?;
        writeln!(f, "lr={:?}", self.lr)?;
        writeln!(f, "eta={:?}", self.eta)?;
        writeln!(f, "rho={:?}", self.rho)?;
        writeln!(f, "denominator={}", self.denominator)?;
        writeln!(f, "symmetric={}", self.symmetric)?;
        writeln!(f, "trimming={}", self.trimming)?;
        writeln!(f, "zeta={:?}", self.zeta)?;
        writeln!(f, "zeta_end={:?}", self.zeta_end)?;
        writeln!(f, "zeta_anneal={}", self.zeta_anneal)?;
        writeln!(f, "bilevel={}", self.bilevel)?;
        writeln!(f, "bilevel_mode={}", self.bilevel_mode)?;
        writeln!(f, "alpha={:?}", self.alpha)?;
        writeln!(f, "beta={:?}", self.beta)?;
        writeln!(f, "outer_lr={:?}", self.outer_lr)?;
        writeln!(f, "folds={}", self.folds)?;
        writeln!(f, "probe_seeds={}", self.probe_seeds)?;
        writeln!(f, "probe_reg={:?}", self.probe_reg)?;
        writeln!(f, "probe_epochs={}", self.probe_epochs)?;
        writeln!(f, "probe_lr={:?}", self.probe_lr)?;
        writeln!(f, "label_fraction={:?}", self.label_fraction)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let c = TrainConfig::default();
        let mut back = TrainConfig {
            seed: 99,
            eta: 7.5,
            ..TrainConfig::default()
        };
        back.apply_text(&c.to_string()).unwrap();
        assert_eq!(back, c);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn overrides_and_errors() {
        let mut c = TrainConfig::default();
        c.apply_override("eta=0.1").unwrap();
        c.apply_override("bilevel_mode=first-order").unwrap();
        assert_eq!((c.eta, c.bilevel_mode), (0.1, BilevelMode::FirstOrder));
        assert!(matches!(c.apply_override("nope=1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(c.apply_override("eta=abc"), Err(ConfigError::Value { .. })));
        assert!(matches!(c.apply_text("\n# c\nseed\n"), Err(ConfigError::Syntax { line: 3, .. })));
        c.batch_size = 1;
        assert!(c.validate().is_err());
    }
}
