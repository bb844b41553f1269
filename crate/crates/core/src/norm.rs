//! Re-basing normalization layers on the statistics of each domain.
//!
//! Given a layer with pretrained statistics `(mu_p, var_p)` and affine
//! parameters `(gamma, beta)`, and statistics `(mu_c, var_c)` measured on new
//! data, the adjusted layer
//!
//! ```text
//! gamma' = gamma * sqrt(var_c) / sqrt(var_p)
//! beta'  = beta - (mu_p - mu_c) * gamma / sqrt(var_p)
//! ```
//!
//! normalizing with `(mu_c, var_c)` computes exactly the same function as the
//! original layer normalizing with `(mu_p, var_p)`.

use ndarray::{Array1, Axis};
use thiserror::Error;

use crate::data::{Domain, DomainDataset};
use crate::model::{norm_inputs, ModelParams, NormLayerState};

/// Variances are floored here before any square root.
pub const VAR_FLOOR: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NormError {
    #[error("no {0} samples to estimate statistics from")]
    EmptyDomain(Domain),
    #[error("non-positive variance in {0}")]
    NonPositiveVariance(&'static str),
    #[error("statistics width {got} does not match layer width {expected}")]
    WidthMismatch { expected: usize, got: usize },
}

/// Mean and population variance of the activations entering one norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

/// Per-layer statistics of the samples that belong to `domain`, with
/// pseudo-source samples counted in `pseudo_source_domain`. Every norm layer
/// runs on its current (pretrained) state of that domain during the pass.
pub fn estimate_stats(
    params: &ModelParams,
    data: &DomainDataset,
    domain: Domain,
    pseudo_source_domain: Domain,
) -> Result<Vec<LayerStats>, NormError> {
    let positions: Vec<usize> = data
        .samples()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.role.domain(pseudo_source_domain) == domain)
        .map(|(i, _)| i)
        .collect();
    if positions.is_empty() {
        return Err(NormError::EmptyDomain(domain));
    }
    let x = data.feature_matrix(&positions);
    Ok(norm_inputs(params, &x, domain)
        .into_iter()
        .map(|z| {
            let mean = z.mean_axis(Axis(0)).expect("non-empty");
            let var = z.var_axis(Axis(0), 0.0).mapv(|v| v.max(VAR_FLOOR));
            LayerStats { mean, var }
        })
        .collect())
}

/// Function-preserving re-basing of `state` onto `(mu_c, var_c)`.
pub fn adjust_params(state: &NormLayerState, mu_c: &Array1<f64>, var_c: &Array1<f64>) -> Result<NormLayerState, NormError> {
    let width = state.width();
    for got in [mu_c.len(), var_c.len()] {
        if got != width {
            return Err(NormError::WidthMismatch { expected: width, got });
        }
    }
    if state.running_var.iter().any(|v| !(*v > 0.0)) {
        return Err(NormError::NonPositiveVariance("pretrained statistics"));
    }
    if var_c.iter().any(|v| !(*v > 0.0)) {
        return Err(NormError::NonPositiveVariance("estimated statistics"));
    }
    let sd_p = state.running_var.mapv(f64::sqrt);
    let gamma = &state.gamma * &var_c.mapv(f64::sqrt) / &sd_p;
    let beta = &state.beta - &((&state.running_mean - mu_c) * &state.gamma / &sd_p);
    Ok(NormLayerState {
        gamma,
        beta,
        running_mean: mu_c.clone(),
        running_var: var_c.clone(),
    })
}

/// Re-bases the source and target states of every norm layer on the
/// statistics of their own domain. Source statistics come from `source`
/// (expanded set included) and target statistics from `target`.
pub fn adapt_model(
    params: &ModelParams,
    source: &DomainDataset,
    target: &DomainDataset,
    pseudo_source_domain: Domain,
) -> Result<ModelParams, NormError> {
    let source_stats = estimate_stats(params, source, Domain::Source, pseudo_source_domain)?;
    let target_stats = estimate_stats(params, target, Domain::Target, pseudo_source_domain)?;
    let mut out = params.clone();
    for (layer, (s, t)) in out.extractor.iter_mut().zip(source_stats.iter().zip(&target_stats)) {
        layer.norm.source = adjust_params(&layer.norm.source, &s.mean, &s.var)?;
        layer.norm.target = adjust_params(&layer.norm.target, &t.mean, &t.var)?;
    }
    Ok(out)
}
