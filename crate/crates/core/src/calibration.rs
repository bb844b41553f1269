//! Temperature calibration of zero-shot predictions.
//!
//! Raw zero-shot probabilities are spread thinly over the classes. A single
//! temperature `T` is solved for so that the mean winning probability, with
//! the source and target domains weighted one half each, equals `tau`. The
//! sharpened probabilities become the distillation teacher.

use std::collections::{HashMap, HashSet};

use ndarray::Array2;
use thiserror::Error;

use crate::autodiff::softmax_rows;
use crate::data::{argmax, Domain, SampleId};

pub const DEFAULT_TAU: f64 = 0.9;
pub const TOLERANCE: f64 = 1e-6;
pub const MAX_ITERATIONS: usize = 200;
const INITIAL_BRACKET: (f64, f64) = (1e-3, 1e3);
const BRACKET_LIMITS: (f64, f64) = (1e-12, 1e12);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("{0} domain has no samples")]
    EmptyDomain(Domain),
    #[error("class count mismatch: {left} vs {right}")]
    ClassMismatch { left: usize, right: usize },
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("tau must lie in (1/K, 1) = ({lower}, 1), got {tau}")]
    InvalidTau { tau: f64, lower: f64 },
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("tau {tau} is unreachable: the mean winning probability never exceeds {sup}")]
    Infeasible { tau: f64, sup: f64 },
    #[error("could not bracket tau {tau} within T in [{lo}, {hi}]")]
    NotBracketed { tau: f64, lo: f64, hi: f64 },
    #[error("bisection stopped at T={temperature} with mean {achieved}, target {tau}")]
    NotConverged { tau: f64, temperature: f64, achieved: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("duplicate sample id {0}")]
    DuplicateId(SampleId),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("row {row} sums to {sum}, expected 1")]
    NotStochastic { row: usize, sum: f64 },
    #[error("sample id {0} not present")]
    UnknownId(SampleId),
}

type Result<T> = std::result::Result<T, CalibrationError>;

/// Raw zero-shot class scores of a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    logits: Array2<f64>,
    sample_ids: Vec<SampleId>,
    domains: Vec<Domain>,
}

impl LogitMatrix {
    pub fn new(logits: Array2<f64>, sample_ids: Vec<SampleId>, domains: Vec<Domain>) -> Result<Self> {
        let (n, k) = logits.dim();
        if k < 2 {
            return Err(CalibrationError::TooFewClasses(k));
        }
        if sample_ids.len() != n || domains.len() != n {
            return Err(CalibrationError::Shape(format!(
                "{n} logit rows, {} ids, {} domain tags",
                sample_ids.len(),
                domains.len()
            )));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(CalibrationError::NonFinite("logits"));
        }
        check_unique(&sample_ids)?;
        Ok(Self {
            logits,
            sample_ids,
            domains,
        })
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn sample_ids(&self) -> &[SampleId] {
        &self.sample_ids
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn num_classes(&self) -> usize {
        self.logits.ncols()
    }

    pub fn len(&self) -> usize {
        self.logits.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_unique(ids: &[SampleId]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(*id) {
            return Err(CalibrationError::DuplicateId(*id));
        }
    }
    Ok(())
}

/// Row-stochastic class probabilities, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelSet {
    probs: Array2<f64>,
    sample_ids: Vec<SampleId>,
    temperature_used: f64,
    index: HashMap<SampleId, usize>,
}

/// Largest tolerated deviation of a row sum from one.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

impl SoftLabelSet {
    /// Validates that every row sums to one within [`ROW_SUM_TOLERANCE`].
    pub fn new(probs: Array2<f64>, sample_ids: Vec<SampleId>, temperature_used: f64) -> Result<Self> {
        if sample_ids.len() != probs.nrows() {
            return Err(CalibrationError::Shape(format!(
                "{} probability rows, {} ids",
                probs.nrows(),
                sample_ids.len()
            )));
        }
        if probs.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CalibrationError::NonFinite("probabilities"));
        }
        for (row, r) in probs.rows().into_iter().enumerate() {
            let sum = r.sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(CalibrationError::NotStochastic { row, sum });
            }
        }
        check_unique(&sample_ids)?;
        let index = sample_ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        Ok(Self {
            probs,
            sample_ids,
            temperature_used,
            index,
        })
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn sample_ids(&self) -> &[SampleId] {
        &self.sample_ids
    }

    pub fn temperature_used(&self) -> f64 {
        self.temperature_used
    }

    pub fn num_classes(&self) -> usize {
        self.probs.ncols()
    }

    pub fn len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, id: SampleId) -> Option<ndarray::ArrayView1<'_, f64>> {
        self.index.get(&id).map(|&i| self.probs.row(i))
    }

    /// Teacher rows for `ids`, in that order.
    pub fn rows_for(&self, ids: &[SampleId]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((ids.len(), self.num_classes()));
        for (r, id) in ids.iter().enumerate() {
            let row = self.row(*id).ok_or(CalibrationError::UnknownId(*id))?;
            out.row_mut(r).assign(&row);
        }
        Ok(out)
    }

    /// Copy with every row divided by its sum.
    pub fn renormalized(&self) -> Self {
        let mut out = self.clone();
        for mut row in out.probs.rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        out
    }

    /// Union of two sets with disjoint ids.
    pub fn concat(&self, other: &SoftLabelSet) -> Result<Self> {
        if self.num_classes() != other.num_classes() {
            return Err(CalibrationError::ClassMismatch {
                left: self.num_classes(),
                right: other.num_classes(),
            });
        }
        let probs = ndarray::concatenate(ndarray::Axis(0), &[self.probs.view(), other.probs.view()])
            .expect("column counts checked");
        let ids = self.sample_ids.iter().chain(&other.sample_ids).copied().collect();
        Self::new(probs, ids, self.temperature_used)
    }

    pub fn argmax_rows(&self) -> Vec<usize> {
        self.probs
            .rows()
            .into_iter()
            .map(|r| argmax(r.as_slice().expect("standard layout")))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationResult {
    pub temperature: f64,
    pub achieved_mean: f64,
    pub iterations: usize,
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(CalibrationError::InvalidTemperature(t))
    }
}

fn check_pair(source: &LogitMatrix, target: &LogitMatrix) -> Result<()> {
    if source.is_empty() {
        return Err(CalibrationError::EmptyDomain(Domain::Source));
    }
    if target.is_empty() {
        return Err(CalibrationError::EmptyDomain(Domain::Target));
    }
    if source.num_classes() != target.num_classes() {
        return Err(CalibrationError::ClassMismatch {
            left: source.num_classes(),
            right: target.num_classes(),
        });
    }
    Ok(())
}

/// Mean over rows of `max softmax(row / t)`.
fn domain_mean_winning(logits: &Array2<f64>, t: f64) -> f64 {
    let total: f64 = logits
        .rows()
        .into_iter()
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            1.0 / row.iter().map(|v| ((v - max) / t).exp()).sum::<f64>()
        })
        .sum();
    total / logits.nrows() as f64
}

/// Limit of the per-domain mean winning probability as `T -> 0+`: each row
/// contributes one over the number of entries tied for its maximum.
fn domain_sup_winning(logits: &Array2<f64>) -> f64 {
    let total: f64 = logits
        .rows()
        .into_iter()
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            1.0 / row.iter().filter(|v| **v == max).count() as f64
        })
        .sum();
    total / logits.nrows() as f64
}

/// Half the source mean plus half the target mean of the winning probability
/// at temperature `t`.
pub fn mean_winning_probability(source: &LogitMatrix, target: &LogitMatrix, t: f64) -> Result<f64> {
    check_pair(source, target)?;
    check_temperature(t)?;
    Ok(0.5 * domain_mean_winning(&source.logits, t) + 0.5 * domain_mean_winning(&target.logits, t))
}

/// Solves for the temperature at which [`mean_winning_probability`] equals `tau`.
///
/// The objective is decreasing in `T`, so geometric bisection on a bracket
/// grown outward from `(1e-3, 1e3)` converges. Bisection continues until the
/// bracket is relatively tight (1e-12) so the returned temperature, not just
/// the achieved mean, is accurate; the result is rejected if the mean misses
/// `tau` by more than [`TOLERANCE`].
pub fn solve_temperature(source: &LogitMatrix, target: &LogitMatrix, tau: f64) -> Result<CalibrationResult> {
    check_pair(source, target)?;
    let k = source.num_classes();
    let lower = 1.0 / k as f64;
    if !(tau > lower && tau < 1.0) {
        return Err(CalibrationError::InvalidTau { tau, lower });
    }
    let sup = 0.5 * domain_sup_winning(&source.logits) + 0.5 * domain_sup_winning(&target.logits);
    if sup <= tau {
        return Err(CalibrationError::Infeasible { tau, sup });
    }

    let f = |t: f64| 0.5 * domain_mean_winning(&source.logits, t) + 0.5 * domain_mean_winning(&target.logits, t) - tau;
    let (mut lo, mut hi) = INITIAL_BRACKET;
    while f(lo) < 0.0 {
        lo /= 10.0;
        if lo < BRACKET_LIMITS.0 {
            return Err(CalibrationError::NotBracketed { tau, lo, hi });
        }
    }
    while f(hi) > 0.0 {
        hi *= 10.0;
        if hi > BRACKET_LIMITS.1 {
            return Err(CalibrationError::NotBracketed { tau, lo, hi });
        }
    }

    let mut temperature = (lo * hi).sqrt();
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        temperature = (lo * hi).sqrt();
        let value = f(temperature);
        if value == 0.0 {
            break;
        }
        if value > 0.0 {
            lo = temperature;
        } else {
            hi = temperature;
        }
        if hi / lo - 1.0 <= 1e-12 {
            break;
        }
    }
    let achieved = f(temperature) + tau;
    if (achieved - tau).abs() > TOLERANCE {
        return Err(CalibrationError::NotConverged {
            tau,
            temperature,
            achieved,
        });
    }
    Ok(CalibrationResult {
        temperature,
        achieved_mean: achieved,
        iterations,
    })
}

/// Row-wise `softmax(logits / t)`.
pub fn sharpen(logits: &LogitMatrix, t: f64) -> Result<SoftLabelSet> {
    check_temperature(t)?;
    let probs = softmax_rows(&logits.logits, t);
    if probs.iter().any(|v| !v.is_finite()) {
        return Err(CalibrationError::NonFinite("sharpened probabilities"));
    }
    SoftLabelSet::new(probs, logits.sample_ids.clone(), t)
}
