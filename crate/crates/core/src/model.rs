//! Feature extractor, classifier head and conditional domain discriminator.
//!
//! Every extractor layer is `linear -> domain norm -> relu`. The domain norm
//! keeps one [`NormLayerState`] per domain and normalizes each row with the
//! state of that row's domain tag. The discriminator sees the row-wise outer
//! product of features and class probabilities, behind a gradient reversal.

use ndarray::{Array1, Array2};
use rand::Rng;
use thiserror::Error;

use crate::autodiff::{self, AutodiffError, GroupStats, Matrix, NodeId, Tape};
use crate::data::Domain;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub disc_hidden: Vec<usize>,
}

impl Architecture {
    /// `input -> 64 -> 64` extractor, `64*K -> 64 -> 1` discriminator.
    pub fn standard(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![64, 64],
            num_classes,
            disc_hidden: vec![64],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in x out`
    pub weight: Matrix,
    /// `1 x out`
    pub bias: Matrix,
}

impl Linear {
    /// Uniform weights in `+-sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-bound..=bound));
        Self {
            weight,
            bias: Array2::zeros((1, fan_out)),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array2::zeros((1, fan_out)),
        }
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        x.dot(&self.weight) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormLayerState {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl NormLayerState {
    /// Unit scale, zero shift, zero mean, unit variance.
    pub fn identity(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    /// `gamma * (x - mean) / sqrt(var) + beta`, column-wise.
    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for j in 0..row.len() {
                row[j] = self.gamma[j] * (row[j] - self.running_mean[j]) / self.running_var[j].sqrt() + self.beta[j];
            }
        }
        out
    }

    fn stats(&self) -> GroupStats {
        GroupStats {
            mean: self.running_mean.clone(),
            var: self.running_var.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainNorm {
    pub source: NormLayerState,
    pub target: NormLayerState,
}

impl DomainNorm {
    pub fn get(&self, domain: Domain) -> &NormLayerState {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    pub fn get_mut(&mut self, domain: Domain) -> &mut NormLayerState {
        match domain {
            Domain::Source => &mut self.source,
            Domain::Target => &mut self.target,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorLayer {
    pub linear: Linear,
    pub norm: DomainNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Feature extractor, trained at the lower learning rate.
    Backbone,
    /// Classifier and discriminator.
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub extractor: Vec<ExtractorLayer>,
    pub classifier: Linear,
    pub discriminator: Vec<Linear>,
}

impl ModelParams {
    pub fn init<R: Rng>(arch: &Architecture, rng: &mut R) -> Self {
        let mut extractor = Vec::with_capacity(arch.hidden.len());
        let mut width = arch.input_dim;
        for &h in &arch.hidden {
            extractor.push(ExtractorLayer {
                linear: Linear::init(width, h, rng),
                norm: DomainNorm {
                    source: NormLayerState::identity(h),
                    target: NormLayerState::identity(h),
                },
            });
            width = h;
        }
        let classifier = Linear::init(width, arch.num_classes, rng);
        let mut discriminator = Vec::with_capacity(arch.disc_hidden.len() + 1);
        let mut d_in = width * arch.num_classes;
        for &h in arch.disc_hidden.iter().chain(std::iter::once(&1)) {
            discriminator.push(Linear::init(d_in, h, rng));
            d_in = h;
        }
        Self {
            extractor,
            classifier,
            discriminator,
        }
    }

    pub fn architecture(&self) -> Architecture {
        let hidden: Vec<usize> = self.extractor.iter().map(|l| l.linear.weight.ncols()).collect();
        let input_dim = self
            .extractor
            .first()
            .map(|l| l.linear.weight.nrows())
            .unwrap_or(self.classifier.weight.nrows());
        let disc_hidden = self.discriminator[..self.discriminator.len().saturating_sub(1)]
            .iter()
            .map(|l| l.weight.ncols())
            .collect();
        Architecture {
            input_dim,
            hidden,
            num_classes: self.classifier.weight.ncols(),
            disc_hidden,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.weight.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.weight.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.architecture().input_dim
    }

    /// Checks that layer shapes chain and variances are positive.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidParams(m));
        let check_linear = |name: &str, l: &Linear, fan_in: usize| -> Result<usize> {
            if l.weight.nrows() != fan_in || l.bias.dim() != (1, l.weight.ncols()) {
                return Err(ModelError::InvalidParams(format!(
                    "{name}: weight {:?} / bias {:?} do not follow width {fan_in}",
                    l.weight.dim(),
                    l.bias.dim()
                )));
            }
            Ok(l.weight.ncols())
        };
        let mut width = self.input_dim();
        for (i, layer) in self.extractor.iter().enumerate() {
            width = check_linear(&format!("extractor.{i}"), &layer.linear, width)?;
            for state in [&layer.norm.source, &layer.norm.target] {
                let w = [
                    state.gamma.len(),
                    state.beta.len(),
                    state.running_mean.len(),
                    state.running_var.len(),
                ];
                if w.iter().any(|&x| x != width) {
                    return bad(format!("extractor.{i}.norm width does not match {width}"));
                }
                if state.running_var.iter().any(|v| !(*v > 0.0)) {
                    return bad(format!("extractor.{i}.norm has a non-positive variance"));
                }
            }
        }
        let k = check_linear("classifier", &self.classifier, width)?;
        let mut d = width * k;
        for (i, l) in self.discriminator.iter().enumerate() {
            d = check_linear(&format!("discriminator.{i}"), l, d)?;
        }
        if d != 1 {
            return bad(format!("discriminator must end in 1 unit, ends in {d}"));
        }
        Ok(())
    }

    /// Trainable arrays with their names and learning-rate group, in a fixed order.
    pub fn trainable(&self) -> Vec<(String, ParamGroup, &[f64])> {
        let mut out: Vec<(String, ParamGroup, &[f64])> = Vec::new();
        fn sl(a: &Matrix) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        fn sl1(a: &Array1<f64>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        for (i, l) in self.extractor.iter().enumerate() {
            out.push((format!("extractor.{i}.weight"), ParamGroup::Backbone, sl(&l.linear.weight)));
            out.push((format!("extractor.{i}.bias"), ParamGroup::Backbone, sl(&l.linear.bias)));
            for (d, st) in [("source", &l.norm.source), ("target", &l.norm.target)] {
                out.push((format!("extractor.{i}.norm.{d}.gamma"), ParamGroup::Backbone, sl1(&st.gamma)));
                out.push((format!("extractor.{i}.norm.{d}.beta"), ParamGroup::Backbone, sl1(&st.beta)));
            }
        }
        out.push(("classifier.weight".into(), ParamGroup::Head, sl(&self.classifier.weight)));
        out.push(("classifier.bias".into(), ParamGroup::Head, sl(&self.classifier.bias)));
        for (i, l) in self.discriminator.iter().enumerate() {
            out.push((format!("discriminator.{i}.weight"), ParamGroup::Head, sl(&l.weight)));
            out.push((format!("discriminator.{i}.bias"), ParamGroup::Head, sl(&l.bias)));
        }
        out
    }

    /// Mutable view in the same order as [`ModelParams::trainable`].
    pub fn trainable_mut(&mut self) -> Vec<(ParamGroup, &mut [f64])> {
        let mut out: Vec<(ParamGroup, &mut [f64])> = Vec::new();
        for l in &mut self.extractor {
            out.push((ParamGroup::Backbone, l.linear.weight.as_slice_mut().expect("standard layout")));
            out.push((ParamGroup::Backbone, l.linear.bias.as_slice_mut().expect("standard layout")));
            for st in [&mut l.norm.source, &mut l.norm.target] {
                out.push((ParamGroup::Backbone, st.gamma.as_slice_mut().expect("standard layout")));
                out.push((ParamGroup::Backbone, st.beta.as_slice_mut().expect("standard layout")));
            }
        }
        out.push((ParamGroup::Head, self.classifier.weight.as_slice_mut().expect("standard layout")));
        out.push((ParamGroup::Head, self.classifier.bias.as_slice_mut().expect("standard layout")));
        for l in &mut self.discriminator {
            out.push((ParamGroup::Head, l.weight.as_slice_mut().expect("standard layout")));
            out.push((ParamGroup::Head, l.bias.as_slice_mut().expect("standard layout")));
        }
        out
    }

    /// Puts every array, trainable or not, on `tape` and returns the handles.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let row = |v: &Array1<f64>| v.clone().insert_axis(ndarray::Axis(0));
        let mut order = Vec::new();
        let mut leaf = |tape: &mut Tape, m: Matrix| {
            let id = tape.leaf(m);
            order.push(id);
            id
        };
        let mut layers = Vec::with_capacity(self.extractor.len());
        for l in &self.extractor {
            let weight = leaf(tape, l.linear.weight.clone());
            let bias = leaf(tape, l.linear.bias.clone());
            let gs = leaf(tape, row(&l.norm.source.gamma));
            let bs = leaf(tape, row(&l.norm.source.beta));
            let gt = leaf(tape, row(&l.norm.target.gamma));
            let bt = leaf(tape, row(&l.norm.target.beta));
            layers.push(BoundLayer {
                linear: BoundLinear { weight, bias },
                gammas: [gs, gt],
                betas: [bs, bt],
                stats: [l.norm.source.stats(), l.norm.target.stats()],
            });
        }
        let classifier = BoundLinear {
            weight: leaf(tape, self.classifier.weight.clone()),
            bias: leaf(tape, self.classifier.bias.clone()),
        };
        let discriminator = self
            .discriminator
            .iter()
            .map(|l| BoundLinear {
                weight: leaf(tape, l.weight.clone()),
                bias: leaf(tape, l.bias.clone()),
            })
            .collect();
        BoundModel {
            layers,
            classifier,
            discriminator,
            order,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct BoundLinear {
    weight: NodeId,
    bias: NodeId,
}

impl BoundLinear {
    fn apply(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let h = tape.matmul(x, self.weight)?;
        Ok(tape.add_row(h, self.bias)?)
    }
}

#[derive(Debug, Clone)]
struct BoundLayer {
    linear: BoundLinear,
    gammas: [NodeId; 2],
    betas: [NodeId; 2],
    stats: [GroupStats; 2],
}

/// Output handles of [`BoundModel::forward`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub features: NodeId,
    pub logits: NodeId,
    pub probs: NodeId,
}

/// Model parameters living on a tape for one step.
#[derive(Debug, Clone)]
pub struct BoundModel {
    layers: Vec<BoundLayer>,
    classifier: BoundLinear,
    discriminator: Vec<BoundLinear>,
    order: Vec<NodeId>,
}

impl BoundModel {
    pub fn forward(&self, tape: &mut Tape, x: NodeId, domains: &[Domain]) -> Result<ForwardNodes> {
        if domains.len() != tape.value(x).nrows() {
            return Err(ModelError::ShapeMismatch(format!(
                "{} domain tags for {} rows",
                domains.len(),
                tape.value(x).nrows()
            )));
        }
        if let Some(first) = self.layers.first() {
            let expected = tape.value(first.linear.weight).nrows();
            if tape.value(x).ncols() != expected {
                return Err(ModelError::ShapeMismatch(format!(
                    "input has {} columns, extractor expects {expected}",
                    tape.value(x).ncols()
                )));
            }
        }
        let groups: Vec<usize> = domains.iter().map(|d| d.group()).collect();
        let mut h = x;
        for layer in &self.layers {
            let z = layer.linear.apply(tape, h)?;
            let n = tape.group_norm(z, &groups, &layer.stats, &layer.gammas, &layer.betas)?;
            h = tape.relu(n)?;
        }
        let logits = self.classifier.apply(tape, h)?;
        let probs = tape.softmax_rows(logits, 1.0)?;
        Ok(ForwardNodes {
            features: h,
            logits,
            probs,
        })
    }

    /// Domain probability (`n x 1`) for a joint feature node, reversing
    /// gradients by `lambda` on the way back.
    pub fn discriminate(&self, tape: &mut Tape, joint: NodeId, lambda: f64) -> Result<NodeId> {
        let expected = tape.value(self.discriminator[0].weight).nrows();
        if tape.value(joint).ncols() != expected {
            return Err(ModelError::ShapeMismatch(format!(
                "joint features have {} columns, discriminator expects {expected}",
                tape.value(joint).ncols()
            )));
        }
        let mut h = tape.gradient_reverse(joint, lambda)?;
        let last = self.discriminator.len() - 1;
        for (i, layer) in self.discriminator.iter().enumerate() {
            h = layer.apply(tape, h)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        Ok(tape.sigmoid(h)?)
    }

    /// Gradients after backward, in [`ModelParams::trainable`] order.
    pub fn gradients<'t>(&self, tape: &'t Tape) -> Vec<&'t Matrix> {
        self.order.iter().map(|id| tape.grad(*id)).collect()
    }

    pub fn param_nodes(&self) -> &[NodeId] {
        &self.order
    }
}

/// Features and class probabilities for a batch.
pub fn forward(params: &ModelParams, x: &Matrix, domains: &[Domain]) -> Result<(Matrix, Matrix)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let xid = tape.constant(x.clone())?;
    let out = bound.forward(&mut tape, xid, domains)?;
    Ok((tape.value(out.features).clone(), tape.value(out.probs).clone()))
}

/// Flattened per-row outer product `f_i p_i^T` (column `a * K + k`).
pub fn multilinear_map(f: &Matrix, p: &Matrix) -> Result<Matrix> {
    if f.nrows() != p.nrows() {
        return Err(ModelError::ShapeMismatch(format!(
            "{} feature rows vs {} probability rows",
            f.nrows(),
            p.nrows()
        )));
    }
    Ok(autodiff::outer_rows(f, p))
}

/// Per-row probability of the source domain.
pub fn discriminate(params: &ModelParams, joint: &Matrix, lambda: f64) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let j = tape.constant(joint.clone())?;
    let out = bound.discriminate(&mut tape, j, lambda)?;
    Ok(tape.value(out).column(0).to_vec())
}

/// Activations entering each norm layer, with every norm layer using the
/// state of `domain`.
pub fn norm_inputs(params: &ModelParams, x: &Matrix, domain: Domain) -> Vec<Matrix> {
    let mut h = x.clone();
    let mut out = Vec::with_capacity(params.extractor.len());
    for layer in &params.extractor {
        let z = layer.linear.apply(&h);
        h = layer.norm.get(domain).apply(&z).mapv(|v| v.max(0.0));
        out.push(z);
    }
    out
}
