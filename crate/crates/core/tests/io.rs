use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use swg::autodiff::softmax_rows;
use swg::data::io::{
    format_checkpoint, format_dataset, format_metrics, format_predictions, parse_checkpoint, parse_dataset,
    parse_metrics, parse_predictions, read_dataset, write_dataset, EpisodeMetrics,
};
use swg::data::synthetic::{build, SyntheticSpec};
use swg::model::{Architecture, ModelParams};
use swg::rng;
use swg::{DataError, DomainDataset, Role, Sample, SampleId, SoftLabelSet};

fn real() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6f64..1e6, -1e-6f64..1e-6, Just(0.0), Just(-0.0), Just(1e300), Just(f64::MIN_POSITIVE)]
}

fn arb_dataset() -> impl Strategy<Value = DomainDataset> {
    (1usize..5, 2usize..5).prop_flat_map(|(dim, k)| {
        let sample = (
            prop_oneof![Just(Role::Source), Just(Role::Target), Just(Role::PseudoSource)],
            prop::option::of(0..k),
            prop::collection::vec(real(), dim),
            prop::collection::vec(real(), k),
        );
        prop::collection::vec(sample, 0..12).prop_map(move |rows| {
            let samples = rows
                .into_iter()
                .enumerate()
                .map(|(i, (role, label, features, zeroshot))| Sample {
                    id: SampleId(7 * i as u64),
                    role,
                    label: if role.is_labeled_role() { Some(label.unwrap_or(0)) } else { label },
                    features,
                    zeroshot,
                })
                .collect();
            DomainDataset::from_samples(dim, k, samples).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn dataset_round_trip(ds in arb_dataset()) {
        let back = parse_dataset(&format_dataset(&ds)).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn predictions_round_trip(seed in 0u64..1000, rows in 1usize..10, k in 2usize..6) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let logits = Array2::from_shape_fn((rows, k), |_| r.random_range(-8.0..8.0));
        let ids = (0..rows as u64).map(|i| SampleId(i * 3 + 1)).collect();
        let p = SoftLabelSet::new(softmax_rows(&logits, 1.0), ids, 1.0).unwrap();
        let back = parse_predictions(&format_predictions(&p)).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn metrics_round_trip(
        records in prop::collection::vec((1usize..3, 1usize..50, real(), real(), real(), prop::option::of(0.0f64..=1.0)), 0..8)
    ) {
        let records: Vec<EpisodeMetrics> = records
            .into_iter()
            .map(|(run, episode, l_ce, l_kd, l_ad, target_accuracy)| EpisodeMetrics { run, episode, l_ce, l_kd, l_ad, target_accuracy })
            .collect();
        prop_assert_eq!(parse_metrics(&format_metrics(&records)).unwrap(), records);
    }

    #[test]
    fn checkpoint_round_trip(seed in 0u64..200, d in 1usize..6, k in 2usize..5) {
        let arch = Architecture { input_dim: d, hidden: vec![3, 2], num_classes: k, disc_hidden: vec![4] };
        let p = ModelParams::init(&arch, &mut rng::stream(seed, rng::INIT, 0));
        prop_assert_eq!(parse_checkpoint(&format_checkpoint(&p)).unwrap(), p);
    }
}

#[test]
fn synthetic_benchmark_survives_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let (source, target) = build(&SyntheticSpec::benchmark(2)).unwrap();
    for (name, ds) in [("s.csv", &source), ("t.csv", &target)] {
        let path = dir.path().join(name);
        write_dataset(&path, ds).unwrap();
        assert_eq!(&read_dataset(&path).unwrap(), ds);
    }
}

#[test]
fn read_errors_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("short.csv");
    std::fs::write(&path, "id,domain,label,f:2,z:2\n1,source,0,1,2,3\n").unwrap();
    let err = read_dataset(&path).unwrap_err();
    assert!(matches!(err, DataError::InFile { .. }));
    let msg = err.to_string();
    assert!(msg.contains("short.csv") && msg.contains("line 2"), "{msg}");
}

#[test]
fn random_streams_are_independent_and_repeatable() {
    let draw = |seed, purpose, index| {
        let mut r = rng::stream(seed, purpose, index);
        (0..4).map(|_| r.random::<u64>()).collect::<Vec<_>>()
    };
    assert_eq!(draw(1, rng::INIT, 0), draw(1, rng::INIT, 0));
    assert_ne!(draw(1, rng::INIT, 0), draw(2, rng::INIT, 0));
    assert_ne!(draw(1, rng::INIT, 0), draw(1, rng::SHUFFLE, 0));
    assert_ne!(draw(1, rng::INIT, 0), draw(1, rng::INIT, 1));
}
