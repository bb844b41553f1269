//! Strong-weak guidance for unsupervised domain adaptation.
//!
//! A small reverse-mode autodiff engine drives an MLP feature extractor with
//! domain-specific normalization, a classifier and a conditional domain
//! discriminator. Zero-shot class scores guide training twice over: sharpened
//! soft labels feed a distillation loss, and the most confident target
//! samples join the source set with hard pseudo-labels.

pub mod autodiff;
pub mod calibration;
pub mod data;
pub mod expansion;
pub mod losses;
pub mod model;
pub mod norm;
pub mod rng;
pub mod trainer;

pub use calibration::{CalibrationError, SoftLabelSet};
pub use data::{DataError, Domain, DomainDataset, Role, Sample, SampleId};
pub use trainer::{run, RunOutput, Scheme, TrainConfig, TrainError};
