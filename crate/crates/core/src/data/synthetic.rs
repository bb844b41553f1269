//! Gaussian class clusters with a rotated and translated target domain, plus
//! a simulated zero-shot oracle.
//!
//! The oracle stands in for a vision-language model: its logits are a small
//! multiple of the negative squared distance to the true source class means,
//! plus per-sample Gaussian noise. It knows the classes but is blind to the
//! domain shift, and its raw softmax outputs are diffuse.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{DataError, DomainDataset, Role, Sample, SampleId};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    /// Source-domain class means, one row per class.
    pub class_means: Vec<Vec<f64>>,
    /// Added to every rotated class mean in the target domain.
    pub translation: Vec<f64>,
    /// Rotation (radians) of the class means in each coordinate plane
    /// `(0, 1), (2, 3), ...`; an odd last coordinate is left alone.
    pub rotation: f64,
    pub source_counts: Vec<usize>,
    pub target_counts: Vec<usize>,
    /// Standard deviation of the isotropic within-class noise.
    pub feature_std: f64,
    /// Standard deviation of the noise added to every oracle logit.
    pub oracle_noise: f64,
    /// Multiplier on the negative squared distance in oracle logits.
    pub oracle_scale: f64,
    pub seed: u64,
}

/// Compact description from which a full [`SyntheticSpec`] is drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkParams {
    pub num_classes: usize,
    pub dim: usize,
    pub source_per_class: usize,
    pub target_per_class: usize,
    /// Standard deviation of each class-mean coordinate.
    pub mean_scale: f64,
    /// Euclidean norm of the target translation.
    pub shift: f64,
    pub rotation: f64,
    pub feature_std: f64,
    pub oracle_noise: f64,
    pub oracle_scale: f64,
    pub seed: u64,
}

impl Default for BenchmarkParams {
    fn default() -> Self {
        Self {
            num_classes: 5,
            dim: 20,
            source_per_class: 10,
            target_per_class: 60,
            mean_scale: 0.6,
            shift: 1.5,
            rotation: 0.6,
            feature_std: 1.0,
            oracle_noise: 0.09,
            oracle_scale: 0.03,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// The default desk-scale benchmark for `seed`.
    pub fn benchmark(seed: u64) -> Self {
        Self::from_params(&BenchmarkParams {
            seed,
            ..BenchmarkParams::default()
        })
    }

    pub fn from_params(p: &BenchmarkParams) -> Self {
        let mut rng = rng::stream(p.seed, rng::CLASS_MEANS, 0);
        let class_means = (0..p.num_classes)
            .map(|_| {
                (0..p.dim)
                    .map(|_| p.mean_scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let mut rng = rng::stream(p.seed, rng::TRANSLATION, 0);
        let direction: Vec<f64> = (0..p.dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        let translation = direction
            .iter()
            .map(|v| if norm > 0.0 { p.shift * v / norm } else { 0.0 })
            .collect();
        Self {
            num_classes: p.num_classes,
            dim: p.dim,
            class_means,
            translation,
            rotation: p.rotation,
            source_counts: vec![p.source_per_class; p.num_classes],
            target_counts: vec![p.target_per_class; p.num_classes],
            feature_std: p.feature_std,
            oracle_noise: p.oracle_noise,
            oracle_scale: p.oracle_scale,
            seed: p.seed,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.dim < 2 {
            return bad(format!("need at least 2 feature dimensions, got {}", self.dim));
        }
        if self.class_means.len() != self.num_classes || self.class_means.iter().any(|m| m.len() != self.dim) {
            return bad("class means must be num_classes rows of dim values".into());
        }
        if self.translation.len() != self.dim {
            return bad("translation must have dim values".into());
        }
        for counts in [&self.source_counts, &self.target_counts] {
            if counts.len() != self.num_classes || counts.iter().any(|&c| c < 1) {
                return bad("every class needs a sample count of at least 1".into());
            }
        }
        if !(self.feature_std >= 0.0) || !(self.oracle_noise >= 0.0) || !(self.oracle_scale > 0.0) {
            return bad("noise scales must be nonnegative and the oracle scale positive".into());
        }
        let finite = self
            .class_means
            .iter()
            .flatten()
            .chain(&self.translation)
            .chain([&self.rotation, &self.feature_std, &self.oracle_noise, &self.oracle_scale])
            .all(|v| v.is_finite());
        if !finite {
            return bad("non-finite value".into());
        }
        Ok(())
    }

    /// Class means of the target domain: rotated plane by plane, then translated.
    pub fn target_means(&self) -> Vec<Vec<f64>> {
        let (sin, cos) = self.rotation.sin_cos();
        self.class_means
            .iter()
            .map(|m| {
                let mut t = m.clone();
                for p in (0..self.dim - 1).step_by(2) {
                    t[p] = cos * m[p] - sin * m[p + 1];
                    t[p + 1] = sin * m[p] + cos * m[p + 1];
                }
                t.iter_mut().zip(&self.translation).for_each(|(v, d)| *v += d);
                t
            })
            .collect()
    }
}

/// Draws the labeled source and target datasets. Zero-shot logits are left at
/// zero; see [`simulate_zeroshot`]. Source ids are `0..n_s`, target ids follow.
pub fn generate(spec: &SyntheticSpec) -> Result<(DomainDataset, DomainDataset), DataError> {
    spec.validate()?;
    let n_source: usize = spec.source_counts.iter().sum();
    let source = draw(
        spec,
        &spec.class_means,
        &spec.source_counts,
        Role::Source,
        0,
        rng::SOURCE_FEATURES,
    )?;
    let target = draw(
        spec,
        &spec.target_means(),
        &spec.target_counts,
        Role::Target,
        n_source as u64,
        rng::TARGET_FEATURES,
    )?;
    Ok((source, target))
}

fn draw(
    spec: &SyntheticSpec,
    means: &[Vec<f64>],
    counts: &[usize],
    role: Role,
    first_id: u64,
    purpose: u32,
) -> Result<DomainDataset, DataError> {
    let mut rng = rng::stream(spec.seed, purpose, 0);
    let mut ds = DomainDataset::new(spec.dim, spec.num_classes);
    let mut id = first_id;
    for (class, (mean, &count)) in means.iter().zip(counts).enumerate() {
        for _ in 0..count {
            let features = mean
                .iter()
                .map(|m| m + spec.feature_std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            ds.push(Sample {
                id: SampleId(id),
                role,
                label: Some(class),
                features,
                zeroshot: vec![0.0; spec.num_classes],
            })?;
            id += 1;
        }
    }
    Ok(ds)
}

/// Fills the zero-shot logits of both datasets from the oracle.
pub fn simulate_zeroshot(source: &mut DomainDataset, target: &mut DomainDataset, spec: &SyntheticSpec) {
    fill_oracle(source, spec, rng::SOURCE_ORACLE);
    fill_oracle(target, spec, rng::TARGET_ORACLE);
}

fn fill_oracle(ds: &mut DomainDataset, spec: &SyntheticSpec, purpose: u32) {
    let mut rng = rng::stream(spec.seed, purpose, 0);
    for s in &mut ds.samples {
        for (k, mean) in spec.class_means.iter().enumerate() {
            let sq: f64 = s.features.iter().zip(mean).map(|(x, m)| (x - m) * (x - m)).sum();
            let noise: f64 = rng.sample(StandardNormal);
            s.zeroshot[k] = -spec.oracle_scale * sq + spec.oracle_noise * noise;
        }
    }
}

/// [`generate`] followed by [`simulate_zeroshot`].
pub fn build(spec: &SyntheticSpec) -> Result<(DomainDataset, DomainDataset), DataError> {
    let (mut source, mut target) = generate(spec)?;
    simulate_zeroshot(&mut source, &mut target, spec);
    Ok((source, target))
}
