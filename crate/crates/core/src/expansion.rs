//! Source-domain expansion: confident target samples are copied into the
//! source set with hard pseudo-labels.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::calibration::SoftLabelSet;
use crate::data::{argmax, DataError, DomainDataset, Role, Sample, SampleId};

/// Weight of the zero-shot term when mixing in previous-run predictions.
pub const ZEROSHOT_MIX_WEIGHT: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ExpansionError {
    #[error("expansion fraction must lie in [0, 1], got {0}")]
    FractionOutOfRange(f64),
    #[error("score sets disagree: {0}")]
    IdMismatch(String),
    #[error("sample id {0} is not in the target set")]
    UnknownSampleId(SampleId),
    #[error(transparent)]
    Data(#[from] DataError),
}

type Result<T> = std::result::Result<T, ExpansionError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionScore {
    pub sample_id: SampleId,
    pub score_vector: Vec<f64>,
    pub winning_class: usize,
    pub winning_score: f64,
}

impl ExpansionScore {
    pub fn new(sample_id: SampleId, score_vector: Vec<f64>) -> Self {
        let winning_class = argmax(&score_vector);
        let winning_score = score_vector[winning_class];
        Self {
            sample_id,
            score_vector,
            winning_class,
            winning_score,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SelectionPolicy {
    /// Top fraction of all target samples.
    Global,
    /// Top fraction within each predicted class.
    #[default]
    ClassBalanced,
}

impl fmt::Display for SelectionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionPolicy::Global => "global",
            SelectionPolicy::ClassBalanced => "class_balanced",
        })
    }
}

impl FromStr for SelectionPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "global" => Ok(SelectionPolicy::Global),
            "class_balanced" => Ok(SelectionPolicy::ClassBalanced),
            other => Err(format!("unknown selection policy `{other}` (expected global|class_balanced)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectedSample {
    pub sample_id: SampleId,
    pub pseudo_label: usize,
    pub winning_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionSelection {
    /// Sorted by descending score, ties by ascending id.
    pub entries: Vec<SelectedSample>,
    pub fraction: f64,
    pub policy: SelectionPolicy,
}

impl ExpansionSelection {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<SampleId> {
        self.entries.iter().map(|e| e.sample_id).collect()
    }
}

/// One score per sample; the score vector is the probability row.
pub fn score_from_soft_labels(labels: &SoftLabelSet) -> Vec<ExpansionScore> {
    labels
        .sample_ids()
        .iter()
        .zip(labels.probs().rows())
        .map(|(id, row)| ExpansionScore::new(*id, row.to_vec()))
        .collect()
}

/// Scores for a second run: previous-run predictions plus half the zero-shot
/// predictions, elementwise and without renormalization. Output follows the
/// order of `prev`.
pub fn mix_scores(prev: &SoftLabelSet, zeroshot: &SoftLabelSet) -> Result<Vec<ExpansionScore>> {
    if prev.num_classes() != zeroshot.num_classes() {
        return Err(ExpansionError::IdMismatch(format!(
            "{} classes vs {} classes",
            prev.num_classes(),
            zeroshot.num_classes()
        )));
    }
    if prev.len() != zeroshot.len() {
        return Err(ExpansionError::IdMismatch(format!(
            "{} previous predictions vs {} zero-shot rows",
            prev.len(),
            zeroshot.len()
        )));
    }
    prev.sample_ids()
        .iter()
        .zip(prev.probs().rows())
        .map(|(id, p)| {
            let z = zeroshot
                .row(*id)
                .ok_or_else(|| ExpansionError::IdMismatch(format!("sample {id} has no zero-shot row")))?;
            let mixed = p.iter().zip(z.iter()).map(|(a, b)| a + ZEROSHOT_MIX_WEIGHT * b).collect();
            Ok(ExpansionScore::new(*id, mixed))
        })
        .collect()
}

/// Ranking used everywhere: higher score first, then lower id.
pub fn rank_order(a: &ExpansionScore, b: &ExpansionScore) -> Ordering {
    b.winning_score
        .total_cmp(&a.winning_score)
        .then(a.sample_id.cmp(&b.sample_id))
}

fn top(mut scores: Vec<&ExpansionScore>, fraction: f64) -> Vec<&ExpansionScore> {
    let k = (fraction * scores.len() as f64).round() as usize;
    scores.sort_by(|a, b| rank_order(a, b));
    scores.truncate(k);
    scores
}

pub fn select_pseudo_source(
    scores: &[ExpansionScore],
    fraction: f64,
    policy: SelectionPolicy,
) -> Result<ExpansionSelection> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(ExpansionError::FractionOutOfRange(fraction));
    }
    let mut seen = HashSet::with_capacity(scores.len());
    if let Some(dup) = scores.iter().find(|s| !seen.insert(s.sample_id)) {
        return Err(ExpansionError::IdMismatch(format!("sample {} scored twice", dup.sample_id)));
    }
    let mut chosen = match policy {
        SelectionPolicy::Global => top(scores.iter().collect(), fraction),
        SelectionPolicy::ClassBalanced => {
            let mut by_class: BTreeMap<usize, Vec<&ExpansionScore>> = BTreeMap::new();
            for s in scores {
                by_class.entry(s.winning_class).or_default().push(s);
            }
            by_class.into_values().flat_map(|group| top(group, fraction)).collect()
        }
    };
    chosen.sort_by(|a, b| rank_order(a, b));
    Ok(ExpansionSelection {
        entries: chosen
            .into_iter()
            .map(|s| SelectedSample {
                sample_id: s.sample_id,
                pseudo_label: s.winning_class,
                winning_score: s.winning_score,
            })
            .collect(),
        fraction,
        policy,
    })
}

/// Source samples followed by pseudo-source copies of the selected target
/// samples, labeled with their pseudo-labels. The target set is untouched.
pub fn expand_dataset(
    source: &DomainDataset,
    target: &DomainDataset,
    selection: &ExpansionSelection,
) -> Result<DomainDataset> {
    let mut out = source.clone();
    for entry in &selection.entries {
        let original = target
            .get(entry.sample_id)
            .ok_or(ExpansionError::UnknownSampleId(entry.sample_id))?;
        out.push(Sample {
            id: original.id,
            role: Role::PseudoSource,
            label: Some(entry.pseudo_label),
            features: original.features.clone(),
            zeroshot: original.zeroshot.clone(),
        })?;
    }
    Ok(out)
}
