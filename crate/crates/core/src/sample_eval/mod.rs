//! Samplers, exact W₂ evaluation and the task-affinity diagnostic.

mod affinity;
mod dump;
mod sampler;
mod wasserstein;

pub use affinity::{average_reports, gradient_cosine, task_affinity, TASReport, TasConfig, TAS_INTERVALS};
pub use dump::{SampleDump, DUMP_MAGIC, DUMP_VERSION};
pub use sampler::{integrate, sample, LabelPolicy, SamplerMode, SamplerSpec};
pub use wasserstein::{min_cost_assignment, wasserstein2, MAX_W2_POINTS};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::DataSampler;
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::net::VelocityField;
use crate::tensor_ad::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub samples: usize,
    /// Fixed so that every checkpoint is scored on the same draws.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples: 2048,
            seed: 20_240_917,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.samples > MAX_W2_POINTS {
            return Err(Error::config(format!(
                "eval.samples must be in 1..={MAX_W2_POINTS}, got {}",
                self.samples
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub mode: SamplerMode,
    pub nfe: usize,
    pub w2: f64,
}

/// Ground-truth cloud, its labels and the starting noise for one evaluation.
pub struct EvalDraws {
    pub truth: Tensor,
    pub labels: Option<Vec<usize>>,
    pub noise: Tensor,
}

pub fn eval_draws(data: &dyn DataSampler, cfg: &EvalConfig) -> Result<EvalDraws> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (truth, labels) = data.sample_stratified(&mut rng, cfg.samples)?;
    let noise = stratified_normal(&mut rng, cfg.samples, truth.cols())?;
    Ok(EvalDraws { truth, labels, noise })
}

/// `n` standard-normal rows in `d` dimensions. Coordinates are taken in
/// pairs, each pair in polar form with angle and radius stratified into `n`
/// strata and randomly paired; an odd last coordinate is drawn plainly.
pub fn stratified_normal(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Result<Tensor> {
    let strata = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut u: Vec<f64> = (0..n).map(|i| (i as f64 + rng.gen::<f64>()) / n as f64).collect();
        u.shuffle(rng);
        u
    };
    let mut out = vec![0.0; n * d];
    for j in (0..d / 2).map(|p| 2 * p) {
        let (angle, radial) = (strata(rng), strata(rng));
        for i in 0..n {
            let theta = 2.0 * std::f64::consts::PI * angle[i];
            let rad = (-2.0 * (1.0 - radial[i]).ln()).sqrt();
            out[i * d + j] = rad * theta.cos();
            out[i * d + j + 1] = rad * theta.sin();
        }
    }
    if d % 2 == 1 {
        for i in 0..n {
            out[i * d + d - 1] = rng.sample(StandardNormal);
        }
    }
    Tensor::matrix(n, d, out)
}

/// W₂ between generated samples and ground truth for each `(mode, nfe)`.
/// All samplers start from the same noise; a conditional field receives the
/// ground-truth labels.
pub fn evaluate<F: VelocityField + ?Sized>(
    field: &F,
    data: &dyn DataSampler,
    cfg: &EvalConfig,
    samplers: &[(SamplerMode, usize)],
) -> Result<Vec<EvalEntry>> {
    let draws = eval_draws(data, cfg)?;
    let labels = if field.num_labels() > 0 {
        Some(draws.labels.as_deref().ok_or_else(|| {
            Error::config("conditional model evaluated on a task without labels")
        })?)
    } else {
        None
    };
    samplers
        .iter()
        .map(|&(mode, nfe)| {
            let spec = SamplerSpec::uniform(mode, nfe)?;
            let out = integrate(field, &spec, draws.noise.clone(), labels)?;
            Ok(EvalEntry {
                mode,
                nfe,
                w2: wasserstein2(&out, &draws.truth)?,
            })
        })
        .collect()
}

pub const SUITE: [(SamplerMode, usize); 3] = [
    (SamplerMode::MeanStep, 1),
    (SamplerMode::MeanStep, 2),
    (SamplerMode::EulerV, 32),
];

/// Mean-step 1 and 2 NFE and euler-v 32 NFE, as a metrics row with only the
/// W₂ columns filled.
pub fn eval_suite<F: VelocityField + ?Sized>(
    field: &F,
    data: &dyn DataSampler,
    cfg: &EvalConfig,
) -> Result<MetricsRecord> {
    let e = evaluate(field, data, cfg, &SUITE)?;
    Ok(MetricsRecord {
        w2_1nfe: Some(e[0].w2),
        w2_2nfe: Some(e[1].w2),
        w2_euler32: Some(e[2].w2),
        ..Default::default()
    })
}

/// W₂ between the evaluation noise and the ground truth; what an
/// identically-zero field scores at any NFE.
pub fn noise_baseline(data: &dyn DataSampler, cfg: &EvalConfig) -> Result<f64> {
    let draws = eval_draws(data, cfg)?;
    wasserstein2(&draws.noise, &draws.truth)
}
