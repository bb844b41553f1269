//! Full training runs: calibration, expansion, norm adaptation, episodic
//! mini-batch training and evaluation.

pub mod config;
pub mod optim;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Matrix, Tape};
use crate::calibration::{sharpen, solve_temperature, CalibrationError, SoftLabelSet};
use crate::data::io::{self, format_predictions, parse_predictions};
use crate::data::{argmax, DataError, Domain, DomainDataset, Role};
use crate::expansion::{
    expand_dataset, mix_scores, score_from_soft_labels, select_pseudo_source, ExpansionError, ExpansionScore,
};
use crate::losses::{adversarial_node, classification_node, kd_node, total_loss, LossError, LossReport};
use crate::model::{forward, Architecture, ModelError, ModelParams};
use crate::norm::{adapt_model, NormError};
use crate::rng;

pub use crate::data::io::EpisodeMetrics;
pub use config::{LambdaMode, Scheme, TrainConfig};
pub use optim::Adam;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("datasets do not fit together: {0}")]
    DataMismatch(String),
    #[error("target set has unlabeled samples; accuracy needs ground truth")]
    Unlabeled,
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Expansion(#[from] ExpansionError),
    #[error(transparent)]
    Norm(#[from] NormError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
}

type Result<T> = std::result::Result<T, TrainError>;

/// Calibrated zero-shot soft labels for both domains.
#[derive(Debug, Clone, PartialEq)]
pub struct Guidance {
    pub temperature: f64,
    pub source: SoftLabelSet,
    pub target: SoftLabelSet,
    /// Source rows followed by target rows.
    pub all: SoftLabelSet,
}

/// Solves for the temperature (or uses `T = 1` when `tau` is `None`) and
/// sharpens the zero-shot logits of both domains.
pub fn guidance(tau: Option<f64>, source: &DomainDataset, target: &DomainDataset) -> Result<Guidance> {
    let s = source.logit_matrix(Domain::Source)?;
    let t = target.logit_matrix(Domain::Target)?;
    let temperature = match tau {
        Some(tau) => solve_temperature(&s, &t, tau)?.temperature,
        None => 1.0,
    };
    let source = sharpen(&s, temperature)?;
    let target = sharpen(&t, temperature)?;
    let all = source.concat(&target)?;
    Ok(Guidance {
        temperature,
        source,
        target,
        all,
    })
}

/// Row positions of every mini-batch in an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub n_source: usize,
    pub n_target: usize,
    /// `ceil(B / 2)`
    pub source_batch: usize,
    /// `floor(B / 2)`
    pub target_batch: usize,
    /// Enough batches to visit every sample of the larger domain once.
    pub batches_per_episode: usize,
}

impl BatchPlan {
    pub fn new(n_source: usize, n_target: usize, batch_size: usize) -> Result<Self> {
        if batch_size < 2 {
            return Err(TrainError::ConfigInvalid("batch_size must be at least 2".into()));
        }
        if n_source == 0 || n_target == 0 {
            return Err(TrainError::DataMismatch("both domains need at least one sample".into()));
        }
        let source_batch = batch_size.div_ceil(2);
        let target_batch = batch_size / 2;
        let batches_per_episode = n_source.div_ceil(source_batch).max(n_target.div_ceil(target_batch));
        Ok(Self {
            n_source,
            n_target,
            source_batch,
            target_batch,
            batches_per_episode,
        })
    }

    /// `(source positions, target positions)` per batch. Each domain is read
    /// through back-to-back shuffles, so the smaller one wraps around.
    pub fn episode(&self, seed: u64, run: usize, episode: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
        let mut r = rng::stream(seed, rng::SHUFFLE, stream_index(run, episode));
        let src = shuffled_cycle(self.n_source, self.batches_per_episode * self.source_batch, &mut r);
        let tgt = shuffled_cycle(self.n_target, self.batches_per_episode * self.target_batch, &mut r);
        src.chunks(self.source_batch)
            .zip(tgt.chunks(self.target_batch))
            .map(|(s, t)| (s.to_vec(), t.to_vec()))
            .collect()
    }
}

fn stream_index(run: usize, episode: usize) -> u32 {
    ((run as u32) << 20) | episode as u32
}

fn shuffled_cycle<R: Rng>(n: usize, needed: usize, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::with_capacity(needed + n);
    while out.len() < needed {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        out.extend(perm);
    }
    out.truncate(needed);
    out
}

/// Random stream for the strong views of one episode.
pub fn augment_stream(seed: u64, run: usize, episode: usize) -> rand_chacha::ChaCha8Rng {
    rng::stream(seed, rng::AUGMENT, stream_index(run, episode))
}

/// `x` plus independent `N(0, noise^2)` jitter, drawn in row-major order.
pub fn strong_view<R: Rng>(x: &Matrix, noise: f64, rng: &mut R) -> Matrix {
    x.mapv(|v| v + noise * rng.sample::<f64, _>(StandardNormal))
}

/// One mini-batch ready for a training step. Rows are ordered source weak,
/// target weak, source strong, target strong.
#[derive(Debug, Clone, PartialEq)]
pub struct StepBatch {
    pub x: Matrix,
    pub domains: Vec<Domain>,
    pub labels: Vec<Option<usize>>,
    pub teacher: Matrix,
}

/// Gathers rows of `source` (expanded) and `target` into a [`StepBatch`].
pub fn assemble_batch<R: Rng>(
    source: &DomainDataset,
    target: &DomainDataset,
    source_pos: &[usize],
    target_pos: &[usize],
    teacher: &SoftLabelSet,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepBatch> {
    let xs = source.feature_matrix(source_pos);
    let xt = target.feature_matrix(target_pos);
    let weak = ndarray::concatenate(ndarray::Axis(0), &[xs.view(), xt.view()]).expect("equal widths");
    let strong = strong_view(&weak, cfg.aug_noise, rng);
    let x = ndarray::concatenate(ndarray::Axis(0), &[weak.view(), strong.view()]).expect("equal widths");

    let mut domains = Vec::with_capacity(weak.nrows());
    let mut labels = Vec::with_capacity(weak.nrows());
    let mut ids = Vec::with_capacity(weak.nrows());
    for &i in source_pos {
        let s = &source.samples()[i];
        domains.push(s.role.domain(cfg.pseudo_source_domain));
        labels.push(s.label);
        ids.push(s.id);
    }
    for &i in target_pos {
        let s = &target.samples()[i];
        domains.push(Domain::Target);
        labels.push(None);
        ids.push(s.id);
    }
    domains.extend_from_within(..);
    labels.extend_from_within(..);
    ids.extend_from_within(..);
    let teacher = teacher.rows_for(&ids)?;
    Ok(StepBatch {
        x,
        domains,
        labels,
        teacher,
    })
}

/// Builds the weighted loss on a fresh tape, backpropagates and applies one
/// optimizer update. Terms with weight zero are not built at all; the
/// adversarial term is skipped for a batch that lacks either domain.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut Adam,
    batch: &StepBatch,
    cfg: &TrainConfig,
    lambda: f64,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(batch.x.clone())?;
    let out = bound.forward(&mut tape, x, &batch.domains)?;

    let mut terms = Vec::with_capacity(3);
    let mut report = [0.0; 3];
    if cfg.ce_weight > 0.0 && batch.labels.iter().any(Option::is_some) {
        let ce = classification_node(&mut tape, out.probs, &batch.labels)?;
        let ce = tape.affine(ce, cfg.ce_weight, 0.0)?;
        report[0] = tape.scalar(ce);
        terms.push(ce);
    }
    if cfg.kd_weight > 0.0 {
        let kd = kd_node(&mut tape, &batch.teacher, out.probs)?;
        let kd = tape.affine(kd, cfg.kd_weight, 0.0)?;
        report[1] = tape.scalar(kd);
        terms.push(kd);
    }
    let both_domains = batch.domains.contains(&Domain::Source) && batch.domains.contains(&Domain::Target);
    if cfg.ad_weight > 0.0 && both_domains {
        let p = tape.detach(out.probs)?;
        let joint = tape.outer_rows(out.features, p)?;
        let d_hat = bound.discriminate(&mut tape, joint, lambda)?;
        let ad = adversarial_node(&mut tape, d_hat, &batch.domains)?;
        let ad = tape.affine(ad, cfg.ad_weight, 0.0)?;
        report[2] = tape.scalar(ad);
        terms.push(ad);
    }
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(total_loss(0.0, 0.0, 0.0));
    };
    let mut total = first;
    for &t in rest {
        total = tape.add(total, t)?;
    }
    tape.backward(total)?;
    opt.step(params, &bound.gradients(&tape));
    Ok(total_loss(report[0], report[1], report[2]))
}

/// Class probabilities for every sample of `ds`, normalized as target data.
pub fn predict(params: &ModelParams, ds: &DomainDataset) -> Result<Matrix> {
    let x = ds.all_features();
    let (_, probs) = forward(params, &x, &vec![Domain::Target; ds.len()])?;
    Ok(probs)
}

/// Fraction of target samples whose predicted class equals the label.
/// Never modifies `params`.
pub fn evaluate(params: &ModelParams, target: &DomainDataset) -> Result<f64> {
    let labels = ground_truth(target)?;
    Ok(accuracy_of(&predict(params, target)?, &labels))
}

fn ground_truth(target: &DomainDataset) -> Result<Vec<usize>> {
    if target.is_empty() {
        return Err(TrainError::Unlabeled);
    }
    target
        .samples()
        .iter()
        .map(|s| s.label.ok_or(TrainError::Unlabeled))
        .collect()
}

fn accuracy_of(probs: &Matrix, labels: &[usize]) -> f64 {
    let hits = probs
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &l)| argmax(row.as_slice().expect("standard layout")) == l)
        .count();
    hits as f64 / labels.len() as f64
}

/// Everything a run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub scheme: Scheme,
    pub seed: u64,
    /// `None` for the zero-shot scheme, which trains nothing.
    pub params: Option<ModelParams>,
    pub metrics: Vec<EpisodeMetrics>,
    /// Final target predictions.
    pub predictions: SoftLabelSet,
    /// Final target accuracy, when the target set is labeled.
    pub accuracy: Option<f64>,
    pub temperature: f64,
    /// Expansion fraction of the final run.
    pub fraction: f64,
    /// Number of pseudo-source samples in the final run.
    pub pseudo_source: usize,
    /// Target predictions of the first run of a two-run scheme.
    pub first_run_predictions: Option<SoftLabelSet>,
}

impl RunOutput {
    /// One `key=value` record describing the outcome.
    pub fn summary(&self) -> String {
        let acc = self.accuracy.map_or("none".to_string(), |a| a.to_string());
        format!(
            "scheme={} seed={} accuracy={acc} temperature={} fraction={} pseudo_source={}",
            self.scheme, self.seed, self.temperature, self.fraction, self.pseudo_source
        )
    }
}

fn check_inputs(source: &DomainDataset, target: &DomainDataset) -> Result<()> {
    if source.dim() != target.dim() || source.num_classes() != target.num_classes() {
        return Err(TrainError::DataMismatch(format!(
            "source has {} features and {} classes, target has {} and {}",
            source.dim(),
            source.num_classes(),
            target.dim(),
            target.num_classes()
        )));
    }
    if let Some(s) = source.samples().iter().find(|s| s.role != Role::Source) {
        return Err(TrainError::DataMismatch(format!("sample {} in the source set has role {}", s.id, s.role)));
    }
    if let Some(s) = target.samples().iter().find(|s| s.role != Role::Target) {
        return Err(TrainError::DataMismatch(format!("sample {} in the target set has role {}", s.id, s.role)));
    }
    if source.is_empty() || target.is_empty() {
        return Err(TrainError::DataMismatch("both domains need at least one sample".into()));
    }
    Ok(())
}

/// Trains with the configured scheme. Target labels, when present, are used
/// only to report accuracy.
pub fn run(cfg: &TrainConfig, source: &DomainDataset, target: &DomainDataset) -> Result<RunOutput> {
    run_in(cfg, source, target, None)
}

/// [`run`], persisting intermediate predictions of a two-run scheme under `dir`.
pub fn run_in(cfg: &TrainConfig, source: &DomainDataset, target: &DomainDataset, dir: Option<&Path>) -> Result<RunOutput> {
    let cfg = cfg.effective();
    cfg.validate()?;
    check_inputs(source, target)?;
    let labels = ground_truth(target).ok();
    let unlabeled = target.without_target_labels();
    let g = guidance(cfg.tau, source, &unlabeled)?;

    match cfg.scheme {
        Scheme::ZeroshotOnly => {
            let accuracy = labels.as_ref().map(|l| accuracy_of(g.target.probs(), l));
            Ok(RunOutput {
                scheme: cfg.scheme,
                seed: cfg.seed,
                params: None,
                metrics: Vec::new(),
                predictions: g.target.clone(),
                accuracy,
                temperature: g.temperature,
                fraction: 0.0,
                pseudo_source: 0,
                first_run_predictions: None,
            })
        }
        Scheme::V1 | Scheme::WeakOnly | Scheme::CdanOnly => {
            let scores = score_from_soft_labels(&g.target);
            let single = train_once(&cfg, 0, cfg.fraction, &scores, source, &unlabeled, labels.as_deref(), &g)?;
            Ok(single.into_output(&cfg, g.temperature, Vec::new(), None))
        }
        Scheme::V2 => {
            let (f1, f2) = cfg.v2_fractions;
            let scores = score_from_soft_labels(&g.target);
            let first = train_once(&cfg, 0, f1, &scores, source, &unlabeled, labels.as_deref(), &g)?;
            let previous = match dir {
                Some(dir) => {
                    let path = dir.join(FIRST_RUN_PREDICTIONS);
                    io::write_predictions(&path, &first.predictions)?;
                    io::read_predictions(&path)?
                }
                None => parse_predictions(&format_predictions(&first.predictions))?,
            };
            let scores = mix_scores(&previous.renormalized(), &g.target)?;
            let second = train_once(&cfg, 1, f2, &scores, source, &unlabeled, labels.as_deref(), &g)?;
            let first_metrics = first.metrics;
            Ok(second.into_output(&cfg, g.temperature, first_metrics, Some(previous)))
        }
    }
}

struct SingleRun {
    params: ModelParams,
    metrics: Vec<EpisodeMetrics>,
    predictions: SoftLabelSet,
    accuracy: Option<f64>,
    fraction: f64,
    pseudo_source: usize,
}

impl SingleRun {
    fn into_output(
        self,
        cfg: &TrainConfig,
        temperature: f64,
        mut earlier: Vec<EpisodeMetrics>,
        first_run_predictions: Option<SoftLabelSet>,
    ) -> RunOutput {
        earlier.extend(self.metrics);
        RunOutput {
            scheme: cfg.scheme,
            seed: cfg.seed,
            params: Some(self.params),
            metrics: earlier,
            predictions: self.predictions,
            accuracy: self.accuracy,
            temperature,
            fraction: self.fraction,
            pseudo_source: self.pseudo_source,
            first_run_predictions,
        }
    }
}

/// Fresh parameters for run `run` of `cfg`, before norm adaptation.
pub fn initial_params(cfg: &TrainConfig, input_dim: usize, num_classes: usize, run: usize) -> ModelParams {
    let arch = Architecture {
        input_dim,
        hidden: cfg.hidden.clone(),
        num_classes,
        disc_hidden: cfg.disc_hidden.clone(),
    };
    ModelParams::init(&arch, &mut rng::stream(cfg.seed, rng::INIT, run as u32))
}

#[allow(clippy::too_many_arguments)]
fn train_once(
    cfg: &TrainConfig,
    run: usize,
    fraction: f64,
    scores: &[ExpansionScore],
    source: &DomainDataset,
    target: &DomainDataset,
    labels: Option<&[usize]>,
    g: &Guidance,
) -> Result<SingleRun> {
    let selection = select_pseudo_source(scores, fraction, cfg.policy)?;
    let expanded = expand_dataset(source, target, &selection)?;
    let init = initial_params(cfg, source.dim(), source.num_classes(), run);
    let mut params = adapt_model(&init, &expanded, target, cfg.pseudo_source_domain)?;
    let mut opt = Adam::new(cfg.lr_backbone, cfg.lr_head, cfg.weight_decay);
    let plan = BatchPlan::new(expanded.len(), target.len(), cfg.batch_size)?;
    let total_steps = (cfg.episodes * plan.batches_per_episode) as f64;

    let mut metrics = Vec::with_capacity(cfg.episodes);
    let mut step = 0usize;
    for episode in 1..=cfg.episodes {
        let mut aug = augment_stream(cfg.seed, run, episode);
        let mut sums = [0.0; 3];
        let batches = plan.episode(cfg.seed, run, episode);
        for (src, tgt) in &batches {
            let batch = assemble_batch(&expanded, target, src, tgt, &g.all, cfg, &mut aug)?;
            let lambda = cfg.lambda_mode.value(cfg.lambda, step as f64 / total_steps);
            let r = train_step(&mut params, &mut opt, &batch, cfg, lambda)?;
            sums[0] += r.l_ce;
            sums[1] += r.l_kd;
            sums[2] += r.l_ad;
            step += 1;
        }
        let n = batches.len() as f64;
        let target_accuracy = match labels {
            Some(l) => Some(accuracy_of(&predict(&params, target)?, l)),
            None => None,
        };
        metrics.push(EpisodeMetrics {
            run: run + 1,
            episode,
            l_ce: sums[0] / n,
            l_kd: sums[1] / n,
            l_ad: sums[2] / n,
            target_accuracy,
        });
    }
    let probs = predict(&params, target)?;
    let accuracy = labels.map(|l| accuracy_of(&probs, l));
    let predictions = SoftLabelSet::new(probs, target.ids(), 1.0)?;
    Ok(SingleRun {
        params,
        metrics,
        predictions,
        accuracy,
        fraction,
        pseudo_source: selection.len(),
    })
}

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const FIRST_RUN_PREDICTIONS: &str = "run1_predictions.csv";
pub const SUMMARY_FILE: &str = "summary.txt";

/// Writes the config echo, metrics, checkpoint, predictions and summary of a
/// finished run into `dir`, which must exist.
pub fn write_artifacts(dir: &Path, cfg: &TrainConfig, out: &RunOutput) -> std::result::Result<(), DataError> {
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|source| DataError::Io { path, source })
    };
    write(CONFIG_FILE, cfg.effective().to_text())?;
    io::write_metrics(&dir.join(METRICS_FILE), &out.metrics)?;
    if let Some(p) = &out.params {
        io::write_checkpoint(&dir.join(CHECKPOINT_FILE), p)?;
    }
    io::write_predictions(&dir.join(PREDICTIONS_FILE), &out.predictions)?;
    if let Some(p) = &out.first_run_predictions {
        io::write_predictions(&dir.join(FIRST_RUN_PREDICTIONS), p)?;
    }
    write(SUMMARY_FILE, out.summary() + "\n")
}
