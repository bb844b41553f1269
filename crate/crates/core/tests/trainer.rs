use swg::data::io::{read_predictions, write_predictions};
use swg::data::synthetic::{build, BenchmarkParams, SyntheticSpec};
use swg::trainer::{run, run_in, write_artifacts, LambdaMode, FIRST_RUN_PREDICTIONS};
use swg::{DomainDataset, Scheme, TrainConfig};

fn data(seed: u64) -> (DomainDataset, DomainDataset) {
    build(&SyntheticSpec::from_params(&BenchmarkParams {
        seed,
        source_per_class: 8,
        target_per_class: 12,
        ..BenchmarkParams::default()
    }))
    .unwrap()
}

fn quick(scheme: Scheme) -> TrainConfig {
    TrainConfig {
        scheme,
        seed: 9,
        episodes: 3,
        hidden: vec![16],
        disc_hidden: vec![8],
        batch_size: 16,
        ..TrainConfig::default()
    }
}

#[test]
fn target_labels_only_feed_the_accuracy() {
    let (s, t) = data(1);
    for scheme in [Scheme::V1, Scheme::V2, Scheme::CdanOnly] {
        let cfg = quick(scheme);
        let labeled = run(&cfg, &s, &t).unwrap();
        let blind = run(&cfg, &s, &t.without_target_labels()).unwrap();
        assert_eq!(labeled.params, blind.params);
        assert_eq!(labeled.predictions, blind.predictions);
        assert!(labeled.accuracy.is_some() && blind.accuracy.is_none());
        for (a, b) in labeled.metrics.iter().zip(&blind.metrics) {
            assert_eq!((a.l_ce, a.l_kd, a.l_ad), (b.l_ce, b.l_kd, b.l_ad));
            assert!(a.target_accuracy.is_some() && b.target_accuracy.is_none());
        }
    }
}

#[test]
fn fraction_zero_adds_no_pseudo_source() {
    let (s, t) = data(2);
    let cfg = TrainConfig {
        fraction: 0.0,
        ..quick(Scheme::V1)
    };
    assert_eq!(run(&cfg, &s, &t).unwrap().pseudo_source, 0);
    let half = run(&quick(Scheme::V1), &s, &t).unwrap();
    let k = t.num_classes() as f64;
    assert!((half.pseudo_source as f64 - t.len() as f64 / 2.0).abs() <= k / 2.0);
}

#[test]
fn v2_runs_twice_and_persisting_changes_nothing() {
    let (s, t) = data(3);
    let cfg = quick(Scheme::V2);
    let dir = tempfile::tempdir().unwrap();
    let on_disk = run_in(&cfg, &s, &t, Some(dir.path())).unwrap();
    let in_memory = run(&cfg, &s, &t).unwrap();
    assert_eq!(on_disk, in_memory);

    let runs: Vec<usize> = on_disk.metrics.iter().map(|m| m.run).collect();
    assert_eq!(runs, vec![1, 1, 1, 2, 2, 2]);
    assert!((on_disk.fraction - 2.0 / 3.0).abs() < 1e-12);

    let first = read_predictions(&dir.path().join(FIRST_RUN_PREDICTIONS)).unwrap();
    assert_eq!(Some(&first), on_disk.first_run_predictions.as_ref());
    let again = tempfile::tempdir().unwrap();
    write_predictions(&again.path().join("p.csv"), &first).unwrap();
    assert_eq!(read_predictions(&again.path().join("p.csv")).unwrap(), first);
}

#[test]
fn zeroshot_only_reports_the_calibrated_oracle() {
    let (s, t) = data(4);
    let out = run(&quick(Scheme::ZeroshotOnly), &s, &t).unwrap();
    assert!(out.params.is_none() && out.metrics.is_empty());
    assert_eq!(out.accuracy, t.zeroshot_accuracy());
}

#[test]
fn ramped_lambda_and_weight_decay_still_train() {
    let (s, t) = data(5);
    let cfg = TrainConfig {
        lambda_mode: LambdaMode::Ramp,
        weight_decay: 1e-3,
        ..quick(Scheme::V1)
    };
    let out = run(&cfg, &s, &t).unwrap();
    assert!(out.metrics.iter().all(|m| m.l_ce.is_finite() && m.l_ad.is_finite()));
    assert_ne!(out.params, run(&quick(Scheme::V1), &s, &t).unwrap().params);
}

#[test]
fn config_echo_reproduces_the_run() {
    let (s, t) = data(6);
    let cfg = TrainConfig {
        tau: None,
        fraction: 0.25,
        ..quick(Scheme::V1)
    };
    let dir = tempfile::tempdir().unwrap();
    let out = run(&cfg, &s, &t).unwrap();
    write_artifacts(dir.path(), &cfg, &out).unwrap();
    let echoed = std::fs::read_to_string(dir.path().join("config.txt")).unwrap();
    let replayed = TrainConfig::from_text(&echoed).unwrap();
    assert_eq!(replayed, cfg);
    assert_eq!(run(&replayed, &s, &t).unwrap(), out);
}

#[test]
fn default_benchmark_oracle_sits_in_the_target_band() {
    let (_, t) = build(&SyntheticSpec::benchmark(0)).unwrap();
    let acc = t.zeroshot_accuracy().unwrap();
    assert_eq!(acc, 0.7166666666666667);
    let mean: f64 = (0..10)
        .map(|seed| build(&SyntheticSpec::benchmark(seed)).unwrap().1.zeroshot_accuracy().unwrap())
        .sum::<f64>()
        / 10.0;
    assert!((0.70..=0.80).contains(&mean), "{mean}");
}
