use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use meanflow::schedules::{beta, clamped_snr_weight, AdaptiveSampler, ScheduleConfig, ScheduleState};

/// Logistic-normal CDF written independently of the sampler.
fn logit_normal_cdf(t: f64, mean: f64, std: f64) -> f64 {
    let x = ((t / (1.0 - t)).ln() - mean) / std;
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Abramowitz-Stegun 7.1.26 is too coarse for a 0.005 KS bound, so use the
/// series/continued-fraction split.
fn erf(x: f64) -> f64 {
    if x < 0.0 {
        return -erf(-x);
    }
    if x < 3.0 {
        let mut term = x;
        let mut sum = x;
        let x2 = x * x;
        for n in 1..200 {
            term *= -x2 / n as f64;
            let add = term / (2 * n + 1) as f64;
            sum += add;
            if add.abs() < 1e-17 {
                break;
            }
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    } else {
        // erfc continued fraction
        let mut f = 0.0;
        for n in (1..60).rev() {
            f = (n as f64 / 2.0) / (x + f);
        }
        1.0 - (-x * x).exp() / (std::f64::consts::PI.sqrt() * (x + f))
    }
}

#[test]
fn base_sampler_passes_ks() {
    let cfg = ScheduleConfig {
        lambda_samples: 1000,
        ..ScheduleConfig::default()
    };
    let (mean, std) = (cfg.logit_mean, cfg.logit_std);
    let state = ScheduleState::new(cfg, 10, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 1_000_000;
    let mut ts: Vec<f64> = (0..n).map(|_| state.sample_t(&mut rng)).collect();
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut d = 0.0f64;
    for (i, &t) in ts.iter().enumerate() {
        let f = logit_normal_cdf(t, mean, std);
        d = d.max((f - i as f64 / n as f64).abs()).max(((i + 1) as f64 / n as f64 - f).abs());
    }
    assert!(d < 0.005, "KS statistic {d}");
}

#[test]
fn uniform_gap_lambda_example() {
    assert!((beta(0.25, 1.0, 2.0) - 1.5).abs() < 1e-15);
}

#[test]
fn progressive_weight_has_unit_mean_mid_training() {
    let cfg = ScheduleConfig {
        fm_ratio: 0.0,
        progressive: true,
        ..ScheduleConfig::default()
    };
    let state = ScheduleState::new(cfg, 100, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (t, r) = state.sample_times(&mut rng, 1_000_000).unwrap();
    let mean = t.iter().zip(&r).map(|(t, r)| beta(t - r, 0.5, state.lambda)).sum::<f64>() / t.len() as f64;
    assert!((mean - 1.0).abs() < 0.01, "{mean}");
}

#[test]
fn dt_range_bounds_every_gap() {
    for range in [[0.1, 0.3], [0.3, 0.5], [0.5, 0.7], [0.7, 0.9]] {
        let cfg = ScheduleConfig {
            fm_ratio: 0.0,
            dt_range: Some(range),
            lambda_samples: 1000,
            ..ScheduleConfig::default()
        };
        let state = ScheduleState::new(cfg, 10, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (t, r) = state.sample_times(&mut rng, 20_000).unwrap();
        for (t, r) in t.iter().zip(&r) {
            let gap = t - r;
            assert!(*r >= 0.0 && gap >= range[0] - 1e-12 && gap <= range[1] + 1e-12, "{gap} outside {range:?}");
        }
    }
}

#[test]
fn clamped_snr_at_one_tenth() {
    // SNR(0.1) = (0.9/0.1)² = 81 > γ = 5
    assert!((clamped_snr_weight(0.1, 5.0) - 5.0 / 81.0).abs() < 1e-15);
}

#[test]
fn adaptive_sampler_uniform_for_equal_losses() {
    let mut s = AdaptiveSampler::new(64, 0.99, 0.1);
    let times: Vec<f64> = (0..6400).map(|i| (i as f64 + 0.5) / 6400.0).collect();
    for _ in 0..50 {
        s.update(&times, &vec![2.0; times.len()]);
    }
    for m in s.masses() {
        assert!((m - 1.0 / 64.0).abs() < 1e-12);
    }
}

#[test]
fn adaptive_sampler_favours_the_lossy_bin() {
    let mut s = AdaptiveSampler::new(64, 0.99, 0.1);
    let times: Vec<f64> = (0..6400).map(|i| (i as f64 + 0.5) / 6400.0).collect();
    let losses: Vec<f64> = times.iter().map(|&t| if (0.5..0.5 + 1.0 / 64.0).contains(&t) { 10.0 } else { 0.1 }).collect();
    for _ in 0..200 {
        s.update(&times, &losses);
    }
    let m = s.masses();
    assert!(m[32] > 1.0 / 64.0);
    assert!(m.iter().all(|&x| x >= 0.1 / 64.0 - 1e-15));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let hits = (0..100_000).filter(|_| (0.5..0.5 + 1.0 / 64.0).contains(&s.sample(&mut rng))).count();
    assert!(hits as f64 / 100_000.0 > 2.0 / 64.0);
}
