//! Classification, distillation and adversarial losses, as plain values and
//! as tape nodes.

use ndarray::Array2;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Matrix, NodeId, Tape, LOG_FLOOR};
use crate::data::Domain;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("no labeled rows in the batch")]
    EmptyMask,
    #[error("batch contains only {0} samples")]
    SingleDomainBatch(Domain),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_ce: f64,
    pub l_kd: f64,
    pub l_ad: f64,
    pub total: f64,
}

pub fn total_loss(l_ce: f64, l_kd: f64, l_ad: f64) -> LossReport {
    LossReport {
        l_ce,
        l_kd,
        l_ad,
        total: l_ce + l_kd + l_ad,
    }
}

fn floored_ln(v: f64) -> f64 {
    v.max(LOG_FLOOR).ln()
}

fn ce_weights(rows: usize, classes: usize, labels: &[Option<usize>]) -> Result<Matrix> {
    if labels.len() != rows {
        return Err(LossError::ShapeMismatch(format!("{} labels for {rows} rows", labels.len())));
    }
    let count = labels.iter().flatten().count();
    if count == 0 {
        return Err(LossError::EmptyMask);
    }
    let mut w = Array2::zeros((rows, classes));
    for (i, label) in labels.iter().enumerate() {
        if let Some(k) = *label {
            if k >= classes {
                return Err(LossError::LabelOutOfRange { label: k, classes });
            }
            w[[i, k]] = -1.0 / count as f64;
        }
    }
    Ok(w)
}

fn check_same_shape(a: &Matrix, b: &Matrix, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(LossError::ShapeMismatch(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn kd_constant(teacher: &Matrix) -> f64 {
    teacher.iter().map(|&t| t * floored_ln(t)).sum::<f64>() / teacher.nrows() as f64
}

fn ad_targets(domains: &[Domain]) -> Result<Vec<f64>> {
    let sources = domains.iter().filter(|d| **d == Domain::Source).count();
    if sources == 0 {
        return Err(LossError::SingleDomainBatch(Domain::Target));
    }
    if sources == domains.len() {
        return Err(LossError::SingleDomainBatch(Domain::Source));
    }
    Ok(domains.iter().map(|d| d.label()).collect())
}

/// Mean `-ln p[label]` over rows with a label; unlabeled rows are masked out.
pub fn classification_loss(p: &Matrix, labels: &[Option<usize>]) -> Result<f64> {
    let w = ce_weights(p.nrows(), p.ncols(), labels)?;
    Ok(p.iter().zip(&w).map(|(&v, &w)| w * floored_ln(v)).sum())
}

/// Mean over rows of `KL(teacher || p)`, both sides floored before the log.
pub fn kd_loss(teacher: &Matrix, p: &Matrix) -> Result<f64> {
    check_same_shape(teacher, p, "teacher vs predictions")?;
    if p.nrows() == 0 {
        return Err(LossError::ShapeMismatch("empty batch".into()));
    }
    let n = p.nrows() as f64;
    Ok(teacher
        .iter()
        .zip(p)
        .map(|(&t, &q)| t * (floored_ln(t) - floored_ln(q)))
        .sum::<f64>()
        / n)
}

/// Mean binary cross-entropy of source-domain probabilities against
/// `source -> 1, target -> 0`.
pub fn adversarial_loss(d_hat: &[f64], domains: &[Domain]) -> Result<f64> {
    if d_hat.len() != domains.len() {
        return Err(LossError::ShapeMismatch(format!(
            "{} predictions for {} domain labels",
            d_hat.len(),
            domains.len()
        )));
    }
    let y = ad_targets(domains)?;
    let n = y.len() as f64;
    Ok(d_hat
        .iter()
        .zip(&y)
        .map(|(&d, &y)| -(y * floored_ln(d) + (1.0 - y) * floored_ln(1.0 - d)))
        .sum::<f64>()
        / n)
}

/// [`classification_loss`] as a 1x1 node over the probability node `p`.
pub fn classification_node(tape: &mut Tape, p: NodeId, labels: &[Option<usize>]) -> Result<NodeId> {
    let (rows, cols) = tape.value(p).dim();
    let w = ce_weights(rows, cols, labels)?;
    let logp = tape.log_rows(p)?;
    Ok(tape.weighted_sum(logp, w)?)
}

/// [`kd_loss`] as a 1x1 node; the teacher is a constant.
pub fn kd_node(tape: &mut Tape, teacher: &Matrix, p: NodeId) -> Result<NodeId> {
    check_same_shape(teacher, tape.value(p), "teacher vs predictions")?;
    if teacher.nrows() == 0 {
        return Err(LossError::ShapeMismatch("empty batch".into()));
    }
    let n = teacher.nrows() as f64;
    let logp = tape.log_rows(p)?;
    let cross = tape.weighted_sum(logp, teacher.mapv(|t| -t / n))?;
    Ok(tape.affine(cross, 1.0, kd_constant(teacher))?)
}

/// [`adversarial_loss`] as a 1x1 node over the `n x 1` discriminator output.
pub fn adversarial_node(tape: &mut Tape, d_hat: NodeId, domains: &[Domain]) -> Result<NodeId> {
    let (rows, cols) = tape.value(d_hat).dim();
    if cols != 1 || rows != domains.len() {
        return Err(LossError::ShapeMismatch(format!(
            "discriminator output {rows}x{cols} for {} domain labels",
            domains.len()
        )));
    }
    let y = ad_targets(domains)?;
    let n = rows as f64;
    let pos = Array2::from_shape_fn((rows, 1), |(i, _)| -y[i] / n);
    let neg = Array2::from_shape_fn((rows, 1), |(i, _)| -(1.0 - y[i]) / n);
    let log_d = tape.log_rows(d_hat)?;
    let a = tape.weighted_sum(log_d, pos)?;
    let complement = tape.affine(d_hat, -1.0, 1.0)?;
    let log_c = tape.log_rows(complement)?;
    let b = tape.weighted_sum(log_c, neg)?;
    Ok(tape.add(a, b)?)
}
