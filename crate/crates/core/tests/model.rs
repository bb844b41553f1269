use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use swg::autodiff::{softmax_rows, Tape};
use swg::losses::{classification_loss, classification_node, kd_loss};
use swg::model::{forward, norm_inputs, Architecture, ModelParams, NormLayerState};
use swg::norm::{adapt_model, adjust_params};
use swg::{Domain, DomainDataset, Role, Sample, SampleId};

fn params(seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::init(&Architecture::standard(5, 4), &mut rng);
    for layer in &mut p.extractor {
        for st in [&mut layer.norm.source, &mut layer.norm.target] {
            let w = st.width();
            st.gamma = Array1::from_shape_fn(w, |_| rng.random_range(0.5..2.0));
            st.running_mean = Array1::from_shape_fn(w, |_| rng.random_range(-1.0..1.0));
        }
    }
    p
}

fn inputs(seed: u64, rows: usize, scale: f64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    Array2::from_shape_fn((rows, 5), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

fn dataset(x: &Array2<f64>, role: Role, first_id: u64) -> DomainDataset {
    let samples = x
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| Sample {
            id: SampleId(first_id + i as u64),
            role,
            label: Some(i % 4),
            features: r.to_vec(),
            zeroshot: vec![0.0; 4],
        })
        .collect();
    DomainDataset::from_samples(5, 4, samples).unwrap()
}

proptest! {
    #[test]
    fn probabilities_are_row_stochastic(seed in 0u64..500, scale in 0.01f64..50.0) {
        let p = params(seed);
        let x = inputs(seed, 7, scale);
        let domains: Vec<Domain> = (0..7).map(|i| if i % 3 == 0 { Domain::Target } else { Domain::Source }).collect();
        let (_, probs) = forward(&p, &x, &domains).unwrap();
        for row in probs.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn domain_tag_is_inert_when_states_agree(seed in 0u64..500) {
        let mut p = params(seed);
        for layer in &mut p.extractor {
            layer.norm.target = layer.norm.source.clone();
        }
        let x = inputs(seed, 6, 1.0);
        let (fs, ps) = forward(&p, &x, &[Domain::Source; 6]).unwrap();
        let (ft, pt) = forward(&p, &x, &[Domain::Target; 6]).unwrap();
        prop_assert_eq!(fs, ft);
        prop_assert_eq!(ps, pt);
    }

    #[test]
    fn kd_is_nonnegative_and_zero_only_on_agreement(
        a in prop::collection::vec(-4.0f64..4.0, 12),
        b in prop::collection::vec(-4.0f64..4.0, 12),
    ) {
        let t = softmax_rows(&Array2::from_shape_vec((3, 4), a).unwrap(), 1.0);
        let p = softmax_rows(&Array2::from_shape_vec((3, 4), b).unwrap(), 1.0);
        let kd = kd_loss(&t, &p).unwrap();
        prop_assert!(kd >= 0.0);
        prop_assert!(kd_loss(&t, &t).unwrap().abs() < 1e-12);
        let gap = t.iter().zip(&p).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        if gap > 1e-3 {
            prop_assert!(kd > 0.0);
        }
    }

    #[test]
    fn adjusting_twice_changes_nothing(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |lo: f64, hi: f64| Array1::from_shape_fn(4, |_| rng.random_range(lo..hi));
        let state = NormLayerState { gamma: v(-2.0, 2.0), beta: v(-1.0, 1.0), running_mean: v(-1.0, 1.0), running_var: v(0.1, 3.0) };
        let (mu, var) = (v(-2.0, 2.0), v(0.1, 3.0));
        let once = adjust_params(&state, &mu, &var).unwrap();
        let twice = adjust_params(&once, &mu, &var).unwrap();
        for (a, b) in once.gamma.iter().chain(&once.beta).zip(twice.gamma.iter().chain(&twice.beta)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn norm_states_adapt_independently() {
    let p = params(3);
    let source = dataset(&inputs(1, 20, 1.0), Role::Source, 0);
    let target_a = dataset(&inputs(2, 15, 1.0), Role::Target, 100);
    let target_b = dataset(&inputs(3, 15, 4.0), Role::Target, 100);
    let a = adapt_model(&p, &source, &target_a, Domain::Source).unwrap();
    let b = adapt_model(&p, &source, &target_b, Domain::Source).unwrap();
    for (la, lb) in a.extractor.iter().zip(&b.extractor) {
        assert_eq!(la.norm.source, lb.norm.source);
        assert_ne!(la.norm.target, lb.norm.target);
    }

    let other_source = dataset(&inputs(4, 20, 3.0), Role::Source, 0);
    let c = adapt_model(&p, &other_source, &target_a, Domain::Source).unwrap();
    for (la, lc) in a.extractor.iter().zip(&c.extractor) {
        assert_eq!(la.norm.target, lc.norm.target);
        assert_ne!(la.norm.source, lc.norm.source);
    }
}

#[test]
fn adaptation_preserves_each_domain_function_on_first_layer() {
    let p = params(8);
    let source = dataset(&inputs(5, 30, 2.0), Role::Source, 0);
    let target = dataset(&inputs(6, 30, 0.5), Role::Target, 100);
    let adapted = adapt_model(&p, &source, &target, Domain::Source).unwrap();
    let x = inputs(7, 10, 1.0);
    for domain in [Domain::Source, Domain::Target] {
        let z = norm_inputs(&p, &x, domain).swap_remove(0);
        let before = p.extractor[0].norm.get(domain).apply(&z);
        let after = adapted.extractor[0].norm.get(domain).apply(&z);
        let dev = (&before - &after).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(dev < 1e-9, "{domain}: {dev}");
    }
}

#[test]
fn classification_descends_on_a_single_sample() {
    for seed in 0..20 {
        let mut p = params(seed);
        let x = inputs(seed, 1, 1.0);
        let labels = [Some((seed % 4) as usize)];
        let loss_at = |p: &ModelParams| classification_loss(&forward(p, &x, &[Domain::Source]).unwrap().1, &labels).unwrap();
        let before = loss_at(&p);

        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let xid = tape.constant(x.clone()).unwrap();
        let out = bound.forward(&mut tape, xid, &[Domain::Source]).unwrap();
        let l = classification_node(&mut tape, out.probs, &labels).unwrap();
        tape.backward(l).unwrap();
        let grads: Vec<Vec<f64>> = bound.gradients(&tape).iter().map(|g| g.iter().copied().collect()).collect();
        for ((_, values), g) in p.trainable_mut().into_iter().zip(&grads) {
            for (v, g) in values.iter_mut().zip(g) {
                *v -= 1e-3 * g;
            }
        }
        assert!(loss_at(&p) < before, "seed {seed}");
    }
}
