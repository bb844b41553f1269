//! Datasets, the synthetic domain-shift benchmark and the text file formats.

pub mod io;
pub mod synthetic;

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use ndarray::Array2;
use thiserror::Error;

use crate::calibration::{CalibrationError, LogitMatrix};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: expected {expected} fields, found {found}")]
    WidthMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("duplicate sample id {0}")]
    DuplicateId(SampleId),
    #[error("sample {0} has role {1} but no label")]
    MissingLabel(SampleId, Role),
    #[error("sample {id}: {msg}")]
    InvalidSample { id: SampleId, msg: String },
    #[error("{}: {source}", path.display())]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<DataError>,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleId(pub u64);

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Which domain a sample is normalized and discriminated as.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Row index used for per-domain normalization groups.
    pub fn group(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }

    /// Label fed to the domain discriminator.
    pub fn label(self) -> f64 {
        match self {
            Domain::Source => 1.0,
            Domain::Target => 0.0,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(format!("unknown domain `{other}` (expected source|target)")),
        }
    }
}

/// Role of a sample within a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Source,
    Target,
    PseudoSource,
}

impl Role {
    /// Domain the sample belongs to, given where pseudo-source copies go.
    pub fn domain(self, pseudo_source: Domain) -> Domain {
        match self {
            Role::Source => Domain::Source,
            Role::Target => Domain::Target,
            Role::PseudoSource => pseudo_source,
        }
    }

    pub fn is_labeled_role(self) -> bool {
        matches!(self, Role::Source | Role::PseudoSource)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Source => "source",
            Role::Target => "target",
            Role::PseudoSource => "pseudo_source",
        })
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "source" => Ok(Role::Source),
            "target" => Ok(Role::Target),
            "pseudo_source" => Ok(Role::PseudoSource),
            other => Err(format!("unknown domain role `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: SampleId,
    pub role: Role,
    pub label: Option<usize>,
    pub features: Vec<f64>,
    pub zeroshot: Vec<f64>,
}

/// Ordered collection of samples sharing one feature width and class count.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    dim: usize,
    num_classes: usize,
    samples: Vec<Sample>,
    index: HashMap<SampleId, usize>,
}

impl DomainDataset {
    pub fn new(dim: usize, num_classes: usize) -> Self {
        Self {
            dim,
            num_classes,
            samples: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn from_samples(dim: usize, num_classes: usize, samples: Vec<Sample>) -> Result<Self, DataError> {
        let mut ds = Self::new(dim, num_classes);
        for s in samples {
            ds.push(s)?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, sample: Sample) -> Result<(), DataError> {
        let id = sample.id;
        if self.index.contains_key(&id) {
            return Err(DataError::DuplicateId(id));
        }
        if sample.features.len() != self.dim {
            return Err(DataError::InvalidSample {
                id,
                msg: format!("{} features, dataset width is {}", sample.features.len(), self.dim),
            });
        }
        if sample.zeroshot.len() != self.num_classes {
            return Err(DataError::InvalidSample {
                id,
                msg: format!(
                    "{} zero-shot logits, dataset has {} classes",
                    sample.zeroshot.len(),
                    self.num_classes
                ),
            });
        }
        match sample.label {
            None if sample.role.is_labeled_role() => return Err(DataError::MissingLabel(id, sample.role)),
            Some(l) if l >= self.num_classes => {
                return Err(DataError::InvalidSample {
                    id,
                    msg: format!("label {l} out of range for {} classes", self.num_classes),
                })
            }
            _ => {}
        }
        if sample.features.iter().chain(&sample.zeroshot).any(|v| !v.is_finite()) {
            return Err(DataError::InvalidSample {
                id,
                msg: "non-finite value".into(),
            });
        }
        self.index.insert(id, self.samples.len());
        self.samples.push(sample);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn get(&self, id: SampleId) -> Option<&Sample> {
        self.index.get(&id).map(|&i| &self.samples[i])
    }

    pub fn ids(&self) -> Vec<SampleId> {
        self.samples.iter().map(|s| s.id).collect()
    }

    /// Same samples with every target label removed.
    pub fn without_target_labels(&self) -> Self {
        let mut out = self.clone();
        for s in &mut out.samples {
            if s.role == Role::Target {
                s.label = None;
            }
        }
        out
    }

    /// Feature rows for the given sample positions.
    pub fn feature_matrix(&self, positions: &[usize]) -> Array2<f64> {
        let mut m = Array2::zeros((positions.len(), self.dim));
        for (r, &i) in positions.iter().enumerate() {
            for (c, v) in self.samples[i].features.iter().enumerate() {
                m[[r, c]] = *v;
            }
        }
        m
    }

    pub fn all_features(&self) -> Array2<f64> {
        let positions: Vec<usize> = (0..self.len()).collect();
        self.feature_matrix(&positions)
    }

    /// Zero-shot logits of every sample, tagged with `domain`.
    pub fn logit_matrix(&self, domain: Domain) -> Result<LogitMatrix, DataError> {
        let mut logits = Array2::zeros((self.len(), self.num_classes));
        for (r, s) in self.samples.iter().enumerate() {
            for (c, v) in s.zeroshot.iter().enumerate() {
                logits[[r, c]] = *v;
            }
        }
        Ok(LogitMatrix::new(logits, self.ids(), vec![domain; self.len()])?)
    }

    /// Fraction of labeled samples whose zero-shot argmax equals the label.
    pub fn zeroshot_accuracy(&self) -> Option<f64> {
        let labeled: Vec<&Sample> = self.samples.iter().filter(|s| s.label.is_some()).collect();
        if labeled.is_empty() {
            return None;
        }
        let hits = labeled
            .iter()
            .filter(|s| Some(argmax(&s.zeroshot)) == s.label)
            .count();
        Some(hits as f64 / labeled.len() as f64)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
