use std::collections::{BTreeMap, HashSet};

use proptest::prelude::*;

use swg::expansion::{
    expand_dataset, score_from_soft_labels, select_pseudo_source, ExpansionError, ExpansionScore, SelectionPolicy,
};
use swg::{DomainDataset, Role, Sample, SampleId, SoftLabelSet};

fn scores_from(raw: &[(u64, [u8; 3])]) -> Vec<ExpansionScore> {
    let mut seen = HashSet::new();
    raw.iter()
        .filter(|(id, _)| seen.insert(*id))
        .map(|(id, v)| ExpansionScore::new(SampleId(*id), v.iter().map(|&x| x as f64 / 4.0).collect()))
        .collect()
}

fn arb_scores() -> impl Strategy<Value = Vec<ExpansionScore>> {
    prop::collection::vec((0u64..200, [0u8..5, 0u8..5, 0u8..5]), 1..40).prop_map(|raw| scores_from(&raw))
}

fn policy() -> impl Strategy<Value = SelectionPolicy> {
    prop_oneof![Just(SelectionPolicy::Global), Just(SelectionPolicy::ClassBalanced)]
}

fn dataset(n: usize, first_id: u64, role: Role) -> DomainDataset {
    let samples = (0..n)
        .map(|i| Sample {
            id: SampleId(first_id + i as u64),
            role,
            label: Some(i % 2),
            features: vec![i as f64, -(i as f64)],
            zeroshot: vec![0.1 * i as f64, 0.0],
        })
        .collect();
    DomainDataset::from_samples(2, 2, samples).unwrap()
}

proptest! {
    #[test]
    fn selection_ignores_input_order(scores in arb_scores(), f in 0.0f64..=1.0, policy in policy()) {
        let a = select_pseudo_source(&scores, f, policy).unwrap();
        let mut reversed = scores.clone();
        reversed.reverse();
        let b = select_pseudo_source(&reversed, f, policy).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn global_selection_is_monotone(scores in arb_scores(), f1 in 0.0f64..=1.0, f2 in 0.0f64..=1.0) {
        let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
        let small: HashSet<_> = select_pseudo_source(&scores, lo, SelectionPolicy::Global).unwrap().ids().into_iter().collect();
        let large: HashSet<_> = select_pseudo_source(&scores, hi, SelectionPolicy::Global).unwrap().ids().into_iter().collect();
        prop_assert!(small.is_subset(&large));
    }

    #[test]
    fn selection_sizes(scores in arb_scores(), f in 0.0f64..=1.0) {
        let global = select_pseudo_source(&scores, f, SelectionPolicy::Global).unwrap();
        prop_assert_eq!(global.len(), (f * scores.len() as f64).round() as usize);

        let balanced = select_pseudo_source(&scores, f, SelectionPolicy::ClassBalanced).unwrap();
        let mut available: BTreeMap<usize, usize> = BTreeMap::new();
        for s in &scores {
            *available.entry(s.winning_class).or_default() += 1;
        }
        let mut picked: BTreeMap<usize, usize> = BTreeMap::new();
        for e in &balanced.entries {
            *picked.entry(e.pseudo_label).or_default() += 1;
        }
        for (class, n) in available {
            prop_assert_eq!(picked.get(&class).copied().unwrap_or(0), (f * n as f64).round() as usize);
        }
    }

    #[test]
    fn entries_are_sorted_and_unique(scores in arb_scores(), f in 0.0f64..=1.0, policy in policy()) {
        let sel = select_pseudo_source(&scores, f, policy).unwrap();
        let ids: HashSet<_> = sel.ids().into_iter().collect();
        prop_assert_eq!(ids.len(), sel.len());
        for w in sel.entries.windows(2) {
            prop_assert!(w[0].winning_score >= w[1].winning_score);
        }
    }
}

#[test]
fn fraction_bounds() {
    let scores = scores_from(&[(1, [1, 2, 3])]);
    for f in [-0.1, 1.01, f64::NAN] {
        assert!(matches!(
            select_pseudo_source(&scores, f, SelectionPolicy::Global),
            Err(ExpansionError::FractionOutOfRange(_))
        ));
    }
}

#[test]
fn expansion_copies_with_pseudo_labels() {
    let source = dataset(3, 0, Role::Source);
    let target = dataset(4, 100, Role::Target);
    let probs = ndarray::array![[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7]];
    let soft = SoftLabelSet::new(probs, target.ids(), 1.0).unwrap();
    let sel = select_pseudo_source(&score_from_soft_labels(&soft), 0.5, SelectionPolicy::Global).unwrap();
    assert_eq!(sel.ids(), vec![SampleId(100), SampleId(101)]);

    let expanded = expand_dataset(&source, &target, &sel).unwrap();
    assert_eq!(expanded.len(), 5);
    assert_eq!(target.len(), 4);
    assert_eq!(&expanded.samples()[..3], source.samples());
    for entry in &sel.entries {
        let copy = expanded.get(entry.sample_id).unwrap();
        let original = target.get(entry.sample_id).unwrap();
        assert_eq!(copy.role, Role::PseudoSource);
        assert_eq!(copy.label, Some(entry.pseudo_label));
        assert_eq!(copy.features, original.features);
    }
    assert_eq!(expanded.get(SampleId(100)).unwrap().label, Some(0));
    assert_eq!(expanded.get(SampleId(101)).unwrap().label, Some(1));
}

#[test]
fn empty_selection_leaves_source_unchanged() {
    let source = dataset(3, 0, Role::Source);
    let target = dataset(2, 10, Role::Target);
    let sel = select_pseudo_source(&scores_from(&[(10, [1, 0, 0]), (11, [0, 1, 0])]), 0.0, SelectionPolicy::Global).unwrap();
    assert_eq!(expand_dataset(&source, &target, &sel).unwrap(), source);
}

#[test]
fn unknown_ids_are_rejected() {
    let source = dataset(1, 0, Role::Source);
    let target = dataset(1, 10, Role::Target);
    let sel = select_pseudo_source(&scores_from(&[(99, [1, 0, 0])]), 1.0, SelectionPolicy::Global).unwrap();
    assert!(matches!(
        expand_dataset(&source, &target, &sel),
        Err(ExpansionError::UnknownSampleId(SampleId(99)))
    ));
}
