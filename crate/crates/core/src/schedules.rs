//! Time/gap sampling and loss-weighting policies.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Progressive gap weight `1 − s + λ·s·(1 − Δt)`.
pub fn beta(dt: f64, s: f64, lambda: f64) -> f64 {
    1.0 - s + lambda * s * (1.0 - dt)
}

/// Training progress `s = 1 − (i/T)^k`, decreasing from 1 to 0.
pub fn progress(i: u64, total: u64, k_sched: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let frac = (i.min(total) as f64) / total as f64;
    1.0 - frac.powf(k_sched)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaKind {
    Unit,
    ClampedSnr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    Base,
    Adaptive,
}

/// Clamped-SNR weight `min(SNR, γ)/SNR` with `SNR(t) = ((1 − t)/t)²`.
///
/// Written as `min(1, γ·t²/(1 − t)²)`, which is finite on all of `[0, 1]`:
/// it is 0 at `t = 0` (infinite SNR) and 1 at `t = 1`.
pub fn clamped_snr_weight(t: f64, gamma: f64) -> f64 {
    if t >= 1.0 {
        return 1.0;
    }
    let ratio = t / (1.0 - t);
    (gamma * ratio * ratio).min(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Fraction of rows sampled with `r = t`.
    pub fm_ratio: f64,
    /// Enables the progressive gap weight; when off every gap weight is 1.
    pub progressive: bool,
    pub k_sched: f64,
    pub alpha: AlphaKind,
    pub snr_gamma: f64,
    pub sampler: SamplerKind,
    pub logit_mean: f64,
    pub logit_std: f64,
    /// Restricts gaps to `[lo, hi]` by affine rescaling.
    pub dt_range: Option<[f64; 2]>,
    pub adaptive_bins: usize,
    pub adaptive_decay: f64,
    /// Share of the sampling mass spread uniformly over all bins.
    pub adaptive_floor: f64,
    /// Monte-Carlo draws used to estimate λ.
    pub lambda_samples: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            fm_ratio: 0.5,
            progressive: false,
            k_sched: 1.0,
            alpha: AlphaKind::Unit,
            snr_gamma: 5.0,
            sampler: SamplerKind::Base,
            logit_mean: -0.4,
            logit_std: 1.0,
            dt_range: None,
            adaptive_bins: 64,
            adaptive_decay: 0.99,
            adaptive_floor: 0.1,
            lambda_samples: 1_000_000,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fm_ratio) {
            return Err(Error::config("schedule.fm_ratio must lie in [0, 1]"));
        }
        if !(self.k_sched > 0.0 && self.k_sched.is_finite()) {
            return Err(Error::config("schedule.k_sched must be positive"));
        }
        if !(self.logit_std > 0.0) || !self.logit_mean.is_finite() {
            return Err(Error::config("schedule.logit_std must be positive"));
        }
        if !(self.snr_gamma > 0.0) {
            return Err(Error::config("schedule.snr_gamma must be positive"));
        }
        if let Some([lo, hi]) = self.dt_range {
            check_dt_range(lo, hi)?;
        }
        if self.adaptive_bins == 0 {
            return Err(Error::config("schedule.adaptive_bins must be positive"));
        }
        if !(0.0..1.0).contains(&self.adaptive_decay) {
            return Err(Error::config("schedule.adaptive_decay must lie in [0, 1)"));
        }
        if !(self.adaptive_floor > 0.0 && self.adaptive_floor <= 1.0) {
            return Err(Error::config("schedule.adaptive_floor must lie in (0, 1]"));
        }
        if self.lambda_samples == 0 {
            return Err(Error::config("schedule.lambda_samples must be positive"));
        }
        Ok(())
    }
}

fn check_dt_range(lo: f64, hi: f64) -> Result<()> {
    if !(lo < hi) {
        return Err(Error::config(format!("dt_range lower bound {lo} must be below upper bound {hi}")));
    }
    if !(lo > 0.0 && hi <= 1.0) {
        return Err(Error::config(format!("dt_range [{lo}, {hi}] must lie inside (0, 1]")));
    }
    Ok(())
}

/// Loss-EMA histogram over `t ∈ [0, 1]` used as the accelerated sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveSampler {
    ema: Vec<Option<f64>>,
    decay: f64,
    floor: f64,
}

impl AdaptiveSampler {
    pub fn new(bins: usize, decay: f64, floor: f64) -> Self {
        AdaptiveSampler {
            ema: vec![None; bins],
            decay,
            floor,
        }
    }

    pub fn bins(&self) -> usize {
        self.ema.len()
    }

    fn bin_of(&self, t: f64) -> usize {
        ((t * self.ema.len() as f64) as usize).min(self.ema.len() - 1)
    }

    /// Folds per-row losses into the per-bin EMAs.
    pub fn update(&mut self, times: &[f64], losses: &[f64]) {
        let n = self.ema.len();
        let mut sums = vec![0.0; n];
        let mut counts = vec![0usize; n];
        for (&t, &l) in times.iter().zip(losses) {
            if !l.is_finite() {
                continue;
            }
            let b = self.bin_of(t);
            sums[b] += l;
            counts[b] += 1;
        }
        for b in 0..n {
            if counts[b] == 0 {
                continue;
            }
            let obs = sums[b] / counts[b] as f64;
            self.ema[b] = Some(match self.ema[b] {
                None => obs,
                Some(prev) => self.decay * prev + (1.0 - self.decay) * obs,
            });
        }
    }

    /// Sampling mass per bin: `(1 − floor)·EMA/ΣEMA + floor/bins`. Bins never
    /// observed borrow the mean of the observed ones.
    pub fn masses(&self) -> Vec<f64> {
        let n = self.ema.len() as f64;
        let seen: Vec<f64> = self.ema.iter().flatten().copied().collect();
        if seen.is_empty() {
            return vec![1.0 / n; self.ema.len()];
        }
        let fill = seen.iter().sum::<f64>() / seen.len() as f64;
        let vals: Vec<f64> = self.ema.iter().map(|e| e.unwrap_or(fill).max(0.0)).collect();
        let total: f64 = vals.iter().sum();
        if !(total > 0.0) {
            return vec![1.0 / n; self.ema.len()];
        }
        vals.iter()
            .map(|v| (1.0 - self.floor) * v / total + self.floor / n)
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let masses = self.masses();
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut bin = masses.len() - 1;
        for (b, m) in masses.iter().enumerate() {
            acc += m;
            if u < acc {
                bin = b;
                break;
            }
        }
        let width = 1.0 / masses.len() as f64;
        (bin as f64 + rng.gen::<f64>()) * width
    }
}

/// Mutable schedule state owned by the training thread.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub config: ScheduleConfig,
    pub iteration: u64,
    pub total: u64,
    /// Frozen at construction: `1 / E[1 − Δt]` over gap rows.
    pub lambda: f64,
    pub adaptive: AdaptiveSampler,
}

impl ScheduleState {
    /// Validates `config` and estimates λ by Monte Carlo with a dedicated
    /// generator seeded from `seed`.
    pub fn new(config: ScheduleConfig, total: u64, seed: u64) -> Result<Self> {
        config.validate()?;
        let adaptive = AdaptiveSampler::new(config.adaptive_bins, config.adaptive_decay, config.adaptive_floor);
        let mut state = ScheduleState {
            config,
            iteration: 0,
            total,
            lambda: 1.0,
            adaptive,
        };
        state.lambda = state.estimate_lambda(seed ^ 0x1a3b_5c7d_9e0f_2468)?;
        Ok(state)
    }

    fn estimate_lambda(&self, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.config.lambda_samples;
        let mut acc = 0.0;
        for _ in 0..n {
            let (t, r) = self.draw_gap_pair(&mut rng)?;
            acc += 1.0 - (t - r);
        }
        let mean = acc / n as f64;
        if !(mean > 0.0) {
            return Err(Error::NumericFault(format!("E[1 - dt] = {mean} leaves lambda undefined")));
        }
        Ok(1.0 / mean)
    }

    /// Consistency check for a state that was decoded rather than built.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let a = &self.adaptive;
        if a.ema.len() != self.config.adaptive_bins
            || a.decay != self.config.adaptive_decay
            || a.floor != self.config.adaptive_floor
        {
            return Err(Error::config("adaptive sampler state does not match its configuration"));
        }
        if a.ema.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::config("adaptive sampler state holds non-finite losses"));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda must be positive and finite"));
        }
        if self.iteration > self.total {
            return Err(Error::config("schedule iteration exceeds its total"));
        }
        Ok(())
    }

    pub fn progress(&self) -> f64 {
        if self.config.progressive {
            progress(self.iteration, self.total, self.config.k_sched)
        } else {
            0.0
        }
    }

    /// Gap weight at the current progress (1 when progressive weighting is off).
    pub fn beta(&self, dt: f64) -> f64 {
        beta(dt, self.progress(), self.lambda)
    }

    pub fn alpha(&self, t: f64) -> f64 {
        match self.config.alpha {
            AlphaKind::Unit => 1.0,
            AlphaKind::ClampedSnr => clamped_snr_weight(t, self.config.snr_gamma),
        }
    }

    pub fn sample_t<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.config.sampler {
            SamplerKind::Base => {
                let n: f64 = rng.sample(StandardNormal);
                let x = self.config.logit_mean + self.config.logit_std * n;
                1.0 / (1.0 + (-x).exp())
            }
            SamplerKind::Adaptive => self.adaptive.sample(rng),
        }
    }

    /// Draws one gap row `(t, r)` with `r < t`, honouring `dt_range`.
    fn draw_gap_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(f64, f64)> {
        let mut t = self.sample_t(rng);
        match self.config.dt_range {
            None => {
                let r = t * rng.gen::<f64>();
                Ok((t, r))
            }
            Some([lo, hi]) => {
                check_dt_range(lo, hi)?;
                let mut tries = 0;
                while t < lo {
                    t = self.sample_t(rng);
                    tries += 1;
                    if tries > 100_000 {
                        return Err(Error::config(format!("time sampler never reaches dt_range lower bound {lo}")));
                    }
                }
                let raw = t * rng.gen::<f64>();
                let gap = rescale_gap(raw, lo, hi);
                Ok((t, (t - gap).max(0.0)))
            }
        }
    }

    /// Per-row `(t, r)` draws: `r = t` with probability `fm_ratio`, otherwise a
    /// gap row.
    pub fn sample_times<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut ts = Vec::with_capacity(batch);
        let mut rs = Vec::with_capacity(batch);
        for _ in 0..batch {
            let fm = rng.gen::<f64>() < self.config.fm_ratio;
            if fm {
                let t = self.sample_t(rng);
                ts.push(t);
                rs.push(t);
            } else {
                let (t, r) = self.draw_gap_pair(rng)?;
                ts.push(t);
                rs.push(r);
            }
        }
        Ok((ts, rs))
    }

    /// Feeds FM-row losses to the adaptive sampler.
    pub fn adaptive_sampler_update(&mut self, t_batch: &[f64], per_row_losses: &[f64]) {
        self.adaptive.update(t_batch, per_row_losses);
    }
}

/// Affine map of a raw gap in `[0, 1]` onto `[lo, hi]`.
pub fn rescale_gap(raw: f64, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * raw
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_examples() {
        for dt in [0.0, 0.3, 0.9, 1.0] {
            assert_eq!(beta(dt, 0.0, 2.0), 1.0);
        }
        assert_eq!(beta(0.25, 1.0, 2.0), 1.5);
    }

    #[test]
    fn progress_examples() {
        assert_eq!(progress(0, 100, 1.0), 1.0);
        assert_eq!(progress(100, 100, 1.0), 0.0);
        assert_eq!(progress(50, 100, 1.0), 0.5);
        assert_eq!(progress(50, 100, 2.0), 0.75);
        for k in [0.5, 1.0, 2.0, 3.0] {
            let mut prev = f64::INFINITY;
            for i in 0..=100 {
                let s = progress(i, 100, k);
                assert!(s <= prev && (0.0..=1.0).contains(&s));
                prev = s;
            }
        }
    }

    #[test]
    fn alpha_examples() {
        let mut cfg = ScheduleConfig {
            lambda_samples: 100,
            ..Default::default()
        };
        let unit = ScheduleState::new(cfg.clone(), 10, 0).unwrap();
        assert_eq!(unit.alpha(0.1), 1.0);
        cfg.alpha = AlphaKind::ClampedSnr;
        let snr = ScheduleState::new(cfg, 10, 0).unwrap();
        // SNR(0.1) = 81
        assert!((snr.alpha(0.1) - 5.0 / 81.0).abs() < 1e-15);
        // SNR(0.5) = 1 <= 5
        assert_eq!(snr.alpha(0.5), 1.0);
        assert_eq!(snr.alpha(0.0), 0.0);
        assert_eq!(snr.alpha(1.0), 1.0);
    }

    #[test]
    fn dt_range_rejects_inverted_bounds() {
        let cfg = ScheduleConfig {
            dt_range: Some([0.5, 0.3]),
            lambda_samples: 10,
            ..Default::default()
        };
        assert!(ScheduleState::new(cfg, 10, 0).is_err());
    }

    #[test]
    fn floor_bounds_every_bin_mass() {
        let mut s = AdaptiveSampler::new(64, 0.99, 0.1);
        let times: Vec<f64> = (0..640).map(|i| (i as f64 + 0.5) / 640.0).collect();
        let losses: Vec<f64> = times.iter().map(|&t| if t < 1.0 / 64.0 { 1e6 } else { 0.0 }).collect();
        s.update(&times, &losses);
        let m = s.masses();
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(m.iter().all(|&x| x >= 0.1 / 64.0 - 1e-15));
    }
}
