//! Training configuration and its flat `key=value` text form.

use std::fmt;
use std::str::FromStr;

use crate::data::Domain;
use crate::expansion::SelectionPolicy;

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// One run at the configured expansion fraction.
    V1,
    /// Two runs; the second re-selects pseudo-source samples using the
    /// first run's predictions.
    V2,
    /// Distillation only, no expansion.
    WeakOnly,
    /// Classification and adversarial losses only.
    CdanOnly,
    /// No training; predictions are the calibrated zero-shot outputs.
    ZeroshotOnly,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::V1 => "v1",
            Scheme::V2 => "v2",
            Scheme::WeakOnly => "weak_only",
            Scheme::CdanOnly => "cdan_only",
            Scheme::ZeroshotOnly => "zeroshot_only",
        })
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "v1" => Ok(Scheme::V1),
            "v2" => Ok(Scheme::V2),
            "weak_only" => Ok(Scheme::WeakOnly),
            "cdan_only" => Ok(Scheme::CdanOnly),
            "zeroshot_only" => Ok(Scheme::ZeroshotOnly),
            other => Err(format!(
                "unknown scheme {other:?} (expected v1, v2, weak_only, cdan_only or zeroshot_only)"
            )),
        }
    }
}

/// Scale applied to reversed gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LambdaMode {
    /// Constant `lambda`.
    Fixed,
    /// `lambda * (2 / (1 + exp(-10 p)) - 1)` with `p` the training progress in `[0, 1]`.
    Ramp,
}

impl fmt::Display for LambdaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LambdaMode::Fixed => "fixed",
            LambdaMode::Ramp => "ramp",
        })
    }
}

impl FromStr for LambdaMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fixed" => Ok(LambdaMode::Fixed),
            "ramp" => Ok(LambdaMode::Ramp),
            other => Err(format!("unknown lambda mode {other:?} (expected fixed or ramp)")),
        }
    }
}

impl LambdaMode {
    pub fn value(self, lambda: f64, progress: f64) -> f64 {
        match self {
            LambdaMode::Fixed => lambda,
            LambdaMode::Ramp => lambda * (2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub seed: u64,
    /// Target mean winning probability; `None` distills the raw `T = 1` softmax.
    pub tau: Option<f64>,
    pub fraction: f64,
    pub v2_fractions: (f64, f64),
    pub episodes: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub weight_decay: f64,
    pub lambda_mode: LambdaMode,
    pub lambda: f64,
    /// Standard deviation of the feature noise that makes the strong view.
    pub aug_noise: f64,
    pub policy: SelectionPolicy,
    pub ce_weight: f64,
    pub kd_weight: f64,
    pub ad_weight: f64,
    /// Domain whose normalization and discriminator label pseudo-source samples get.
    pub pseudo_source_domain: Domain,
    pub hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::V1,
            seed: 0,
            tau: Some(0.9),
            fraction: 0.5,
            v2_fractions: (1.0 / 3.0, 2.0 / 3.0),
            episodes: 10,
            batch_size: 64,
            lr_backbone: 5e-4,
            lr_head: 5e-3,
            weight_decay: 0.0,
            lambda_mode: LambdaMode::Fixed,
            lambda: 1.0,
            aug_noise: 0.3,
            policy: SelectionPolicy::ClassBalanced,
            ce_weight: 1.0,
            kd_weight: 1.0,
            ad_weight: 1.0,
            pseudo_source_domain: Domain::Source,
            hidden: vec![64, 64],
            disc_hidden: vec![64],
        }
    }
}

/// Keys accepted by [`TrainConfig::set`], in echo order.
pub const KEYS: &[&str] = &[
    "scheme",
    "seed",
    "tau",
    "fraction",
    "v2_first_fraction",
    "v2_second_fraction",
    "episodes",
    "batch_size",
    "lr_backbone",
    "lr_head",
    "weight_decay",
    "lambda_mode",
    "lambda",
    "aug_noise",
    "policy",
    "ce_weight",
    "kd_weight",
    "ad_weight",
    "pseudo_source_domain",
    "hidden",
    "disc_hidden",
];

fn invalid(msg: impl Into<String>) -> TrainError {
    TrainError::ConfigInvalid(msg.into())
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, TrainError> {
    value
        .parse()
        .map_err(|_| invalid(format!("{key}: cannot parse {value:?}")))
}

fn parse_widths(key: &str, value: &str) -> Result<Vec<usize>, TrainError> {
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join_widths(w: &[usize]) -> String {
    if w.is_empty() {
        return "none".into();
    }
    w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let value = value.trim();
        match key {
            "scheme" => self.scheme = value.parse().map_err(invalid)?,
            "seed" => self.seed = parse(key, value)?,
            "tau" => {
                self.tau = match value {
                    "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "fraction" => self.fraction = parse(key, value)?,
            "v2_first_fraction" => self.v2_fractions.0 = parse(key, value)?,
            "v2_second_fraction" => self.v2_fractions.1 = parse(key, value)?,
            "episodes" => self.episodes = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr_backbone" => self.lr_backbone = parse(key, value)?,
            "lr_head" => self.lr_head = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "lambda_mode" => self.lambda_mode = value.parse().map_err(invalid)?,
            "lambda" => self.lambda = parse(key, value)?,
            "aug_noise" => self.aug_noise = parse(key, value)?,
            "policy" => self.policy = value.parse().map_err(|e: String| invalid(e))?,
            "ce_weight" => self.ce_weight = parse(key, value)?,
            "kd_weight" => self.kd_weight = parse(key, value)?,
            "ad_weight" => self.ad_weight = parse(key, value)?,
            "pseudo_source_domain" => self.pseudo_source_domain = parse(key, value)?,
            "hidden" => self.hidden = parse_widths(key, value)?,
            "disc_hidden" => self.disc_hidden = parse_widths(key, value)?,
            other => return Err(invalid(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Current value of `key` as it would be written by [`TrainConfig::to_text`].
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "scheme" => self.scheme.to_string(),
            "seed" => self.seed.to_string(),
            "tau" => self.tau.map_or("none".into(), |t| t.to_string()),
            "fraction" => self.fraction.to_string(),
            "v2_first_fraction" => self.v2_fractions.0.to_string(),
            "v2_second_fraction" => self.v2_fractions.1.to_string(),
            "episodes" => self.episodes.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr_backbone" => self.lr_backbone.to_string(),
            "lr_head" => self.lr_head.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "lambda_mode" => self.lambda_mode.to_string(),
            "lambda" => self.lambda.to_string(),
            "aug_noise" => self.aug_noise.to_string(),
            "policy" => self.policy.to_string(),
            "ce_weight" => self.ce_weight.to_string(),
            "kd_weight" => self.kd_weight.to_string(),
            "ad_weight" => self.ad_weight.to_string(),
            "pseudo_source_domain" => self.pseudo_source_domain.to_string(),
            "hidden" => join_widths(&self.hidden),
            "disc_hidden" => join_widths(&self.disc_hidden),
            _ => return None,
        })
    }

    /// Applies `key=value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), TrainError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("line {}: expected key=value, found {line:?}", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| invalid(format!("line {}: {}", i + 1, e)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, TrainError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Every key, one `key=value` line each.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("listed key")))
            .collect()
    }

    /// The configuration a run actually uses: ablation schemes pin their
    /// fraction and loss weights.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        match c.scheme {
            Scheme::WeakOnly => c.fraction = 0.0,
            Scheme::CdanOnly => {
                c.fraction = 0.0;
                c.kd_weight = 0.0;
            }
            Scheme::V1 | Scheme::V2 | Scheme::ZeroshotOnly => {}
        }
        c
    }

    /// Checks everything that does not depend on the data.
    pub fn validate(&self) -> Result<(), TrainError> {
        for (name, f) in [
            ("fraction", self.fraction),
            ("v2_first_fraction", self.v2_fractions.0),
            ("v2_second_fraction", self.v2_fractions.1),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(invalid(format!("{name} must lie in [0, 1], got {f}")));
            }
        }
        if let Some(t) = self.tau {
            if !(t > 0.0 && t < 1.0) {
                return Err(invalid(format!("tau must lie in (1/K, 1), got {t}")));
            }
        }
        if self.episodes < 1 {
            return Err(invalid("episodes must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(invalid("batch_size must be at least 2"));
        }
        for (name, v) in [("lr_backbone", self.lr_backbone), ("lr_head", self.lr_head)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("lambda", self.lambda),
            ("aug_noise", self.aug_noise),
            ("ce_weight", self.ce_weight),
            ("kd_weight", self.kd_weight),
            ("ad_weight", self.ad_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.ce_weight == 0.0 && self.kd_weight == 0.0 && self.ad_weight == 0.0 {
            return Err(invalid("at least one loss weight must be positive"));
        }
        if self.hidden.iter().chain(&self.disc_hidden).any(|&w| w == 0) {
            return Err(invalid("layer widths must be positive"));
        }
        Ok(())
    }
}
