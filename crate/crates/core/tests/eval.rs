use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use meanflow::data::{DataSampler, Task, SINGLE_DATUM};
use meanflow::net::{NetConfig, SingleDatumField, VelocityNet};
use meanflow::sample_eval::{
    eval_draws, eval_suite, evaluate, gradient_cosine, integrate, noise_baseline, stratified_normal, task_affinity,
    wasserstein2, EvalConfig, SamplerMode, SamplerSpec, TasConfig,
};
use meanflow::flow::LossOptions;
use meanflow::schedules::ScheduleConfig;
use meanflow::tensor_ad::Tensor;

fn cloud(seed: u64, n: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..2 * n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(n, 2, data).unwrap()
}

fn zero_net() -> VelocityNet {
    let cfg = NetConfig {
        hidden: vec![8],
        time_embed_dim: 4,
        ..NetConfig::default()
    };
    VelocityNet::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
}

#[test]
fn zero_net_one_step_returns_the_noise() {
    let eps = cloud(1, 50);
    let spec = SamplerSpec::uniform(SamplerMode::MeanStep, 1).unwrap();
    assert_eq!(integrate(&zero_net(), &spec, eps.clone(), None).unwrap(), eps);
}

#[test]
fn true_single_datum_field_is_exact_at_one_and_two_steps() {
    let field = SingleDatumField { x: SINGLE_DATUM.to_vec() };
    let eps = cloud(2, 500);
    for nfe in [1, 2] {
        let spec = SamplerSpec::uniform(SamplerMode::MeanStep, nfe).unwrap();
        let out = integrate(&field, &spec, eps.clone(), None).unwrap();
        for i in 0..out.rows() {
            assert_eq!(out.row(i), &SINGLE_DATUM);
        }
    }
    let cfg = EvalConfig {
        samples: 512,
        ..EvalConfig::default()
    };
    let rec = eval_suite(&field, &Task::SingleDatum, &cfg).unwrap();
    assert_eq!((rec.w2_1nfe, rec.w2_2nfe, rec.w2_euler32), (Some(0.0), Some(0.0), Some(0.0)));
}

#[test]
fn zero_net_scores_the_noise_baseline() {
    let cfg = EvalConfig {
        samples: 512,
        ..EvalConfig::default()
    };
    let base = noise_baseline(&Task::Gauss8, &cfg).unwrap();
    let entries = evaluate(&zero_net(), &Task::Gauss8, &cfg, &[(SamplerMode::MeanStep, 1)]).unwrap();
    assert!((entries[0].w2 - base).abs() <= 0.02 * base);
    let draws = eval_draws(&Task::Gauss8, &cfg).unwrap();
    assert_eq!(base, wasserstein2(&draws.noise, &draws.truth).unwrap());
}

#[test]
fn eval_draws_are_fixed_and_balanced() {
    let cfg = EvalConfig {
        samples: 800,
        ..EvalConfig::default()
    };
    let a = eval_draws(&Task::Gauss8, &cfg).unwrap();
    let b = eval_draws(&Task::Gauss8, &cfg).unwrap();
    assert_eq!(a.truth, b.truth);
    assert_eq!(a.noise, b.noise);
    let labels = a.labels.unwrap();
    for k in 0..8 {
        assert_eq!(labels.iter().filter(|&&l| l == k).count(), 100);
    }
}

#[test]
fn stratified_noise_has_standard_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 20_000;
    let z = stratified_normal(&mut rng, n, 3).unwrap();
    for j in 0..3 {
        let col: Vec<f64> = (0..n).map(|i| z.row(i)[j]).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03 && (var - 1.0).abs() < 0.05, "column {j}: {mean} {var}");
    }
}

#[test]
fn multi_nfe_list_gives_one_entry_each() {
    let cfg = EvalConfig {
        samples: 128,
        ..EvalConfig::default()
    };
    let s = [(SamplerMode::MeanStep, 1), (SamplerMode::MeanStep, 2), (SamplerMode::EulerV, 32)];
    assert_eq!(evaluate(&zero_net(), &Task::TwoMoons, &cfg, &s).unwrap().len(), 3);
}

#[test]
fn affinity_values_are_cosines() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut net = zero_net();
    for p in net.params_mut() {
        for x in p.data_mut() {
            *x += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let cfg = TasConfig {
        n_points: 400,
        batches: 4,
        ..TasConfig::default()
    };
    let rep = task_affinity(&net, &Task::Gauss8, &ScheduleConfig::default(), &LossOptions::default(), &cfg, &mut rng)
        .unwrap();
    assert_eq!(rep.values.len(), 4);
    assert!(rep.values.iter().all(|v| v.is_some_and(|c| (-1.0..=1.0).contains(&c))));
}

fn perm_of(seed: u64, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        p.swap(i, rng.gen_range(0..=i));
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn w2_is_symmetric(s1 in 0u64..10_000, s2 in 0u64..10_000, n in 1usize..24) {
        let (a, b) = (cloud(s1, n), cloud(s2 + 10_000, n));
        let ab = wasserstein2(&a, &b).unwrap();
        let ba = wasserstein2(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
    }

    #[test]
    fn w2_triangle_inequality(s in 0u64..10_000, n in 1usize..20) {
        let (a, b, c) = (cloud(3 * s, n), cloud(3 * s + 1, n), cloud(3 * s + 2, n));
        let ab = wasserstein2(&a, &b).unwrap();
        let bc = wasserstein2(&b, &c).unwrap();
        let ac = wasserstein2(&a, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-12);
    }

    #[test]
    fn w2_zero_iff_permutation(s in 0u64..10_000, n in 1usize..24) {
        let a = cloud(s, n);
        let b = a.select_rows(&perm_of(s, n));
        prop_assert_eq!(wasserstein2(&a, &b).unwrap(), 0.0);
        let mut c = b.clone();
        c.data_mut()[0] += 0.5;
        prop_assert!(wasserstein2(&a, &c).unwrap() > 0.0);
    }

    #[test]
    fn cosine_ignores_positive_scaling(s in 0u64..10_000, k1 in 0.01f64..100.0, k2 in 0.01f64..100.0) {
        let (a, b) = (cloud(s, 5), cloud(s + 1, 5));
        let c0 = gradient_cosine(&[a.clone()], &[b.clone()]).unwrap();
        let c1 = gradient_cosine(&[a.map(|x| k1 * x)], &[b.map(|x| k2 * x)]).unwrap();
        prop_assert!((c0 - c1).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&c0));
        let neg = gradient_cosine(&[a.clone()], &[a.map(|x| -x)]).unwrap();
        prop_assert!((neg + 1.0).abs() < 1e-12);
    }
}

#[test]
fn stratified_task_draws_stay_on_support() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for task in Task::ALL {
        let (x, _) = task.sample_stratified(&mut rng, 256).unwrap();
        assert_eq!(x.rows(), 256);
        assert!(x.is_finite());
    }
}
