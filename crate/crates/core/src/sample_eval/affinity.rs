use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::DataSampler;
use crate::error::{Error, Result};
use crate::flow::{meanflow_loss_grad, LossOptions, TrainingBatch};
use crate::net::VelocityNet;
use crate::schedules::{ScheduleConfig, ScheduleState};
use crate::tensor_ad::Tensor;

pub const TAS_INTERVALS: [[f64; 2]; 4] = [[0.1, 0.3], [0.3, 0.5], [0.5, 0.7], [0.7, 0.9]];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TasConfig {
    pub n_points: usize,
    /// The points are split into this many gradient batches.
    pub batches: usize,
    pub intervals: Vec<[f64; 2]>,
}

impl Default for TasConfig {
    fn default() -> Self {
        TasConfig {
            n_points: 5000,
            batches: 10,
            intervals: TAS_INTERVALS.to_vec(),
        }
    }
}

/// Gradient cosine between the flow-matching loss and the gap loss for each
/// gap interval. `None` marks an interval where a gradient vanished.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TASReport {
    pub intervals: Vec<[f64; 2]>,
    pub values: Vec<Option<f64>>,
    pub samples: usize,
}

/// Cosine similarity of two flattened gradient lists; `None` if either is
/// exactly zero.
pub fn gradient_cosine(a: &[Tensor], b: &[Tensor]) -> Option<f64> {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        for (&p, &q) in x.data().iter().zip(y.data()) {
            dot += p * q;
            na += p * p;
            nb += q * q;
        }
    }
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

fn state_for(base: &ScheduleConfig, fm_ratio: f64, dt_range: Option<[f64; 2]>) -> Result<ScheduleState> {
    let cfg = ScheduleConfig {
        fm_ratio,
        dt_range,
        progressive: false,
        lambda_samples: 1,
        ..base.clone()
    };
    ScheduleState::new(cfg, 1, 0)
}

pub fn task_affinity(
    net: &VelocityNet,
    data: &dyn DataSampler,
    sched: &ScheduleConfig,
    loss: &LossOptions,
    cfg: &TasConfig,
    rng: &mut dyn RngCore,
) -> Result<TASReport> {
    if cfg.n_points < 2 || cfg.batches == 0 || cfg.n_points < cfg.batches {
        return Err(Error::config("task affinity needs n_points >= 2 and at least one point per batch"));
    }
    let v_state = state_for(sched, 1.0, None)?;
    let u_states: Vec<ScheduleState> = cfg
        .intervals
        .iter()
        .map(|&iv| state_for(sched, 0.0, Some(iv)))
        .collect::<Result<_>>()?;
    let per_batch = cfg.n_points / cfg.batches;
    let mut sums = vec![0.0; cfg.intervals.len()];
    let mut counts = vec![0usize; cfg.intervals.len()];
    for _ in 0..cfg.batches {
        let (x, labels) = data.sample(rng, per_batch)?;
        let d = x.cols();
        let noise: Vec<f64> = (0..per_batch * d).map(|_| rng.sample(StandardNormal)).collect();
        let eps = Tensor::matrix(per_batch, d, noise)?;
        let (t, r) = v_state.sample_times(rng, per_batch)?;
        let v_batch = TrainingBatch::from_parts(x.clone(), eps.clone(), t, r, labels.clone())?;
        let (_, v_grad) = meanflow_loss_grad(net, &v_batch, &v_state, loss)?;
        for (k, st) in u_states.iter().enumerate() {
            let (t, r) = st.sample_times(rng, per_batch)?;
            let u_batch = TrainingBatch::from_parts(x.clone(), eps.clone(), t, r, labels.clone())?;
            let (_, u_grad) = meanflow_loss_grad(net, &u_batch, st, loss)?;
            if let Some(c) = gradient_cosine(&v_grad, &u_grad) {
                sums[k] += c;
                counts[k] += 1;
            }
        }
    }
    let values = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    Ok(TASReport {
        intervals: cfg.intervals.clone(),
        values,
        samples: per_batch * cfg.batches,
    })
}

/// Averages reports taken at several points of a run, interval by interval.
pub fn average_reports(reports: &[TASReport]) -> Option<TASReport> {
    let first = reports.first()?;
    let k = first.intervals.len();
    let mut values = Vec::with_capacity(k);
    for i in 0..k {
        let vals: Vec<f64> = reports.iter().filter_map(|r| r.values.get(i).copied().flatten()).collect();
        values.push((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64));
    }
    Some(TASReport {
        intervals: first.intervals.clone(),
        values,
        samples: reports.iter().map(|r| r.samples).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        let g = vec![Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap()];
        let neg: Vec<Tensor> = g.iter().map(|t| t.map(|x| -x)).collect();
        assert!((gradient_cosine(&g, &g).unwrap() - 1.0).abs() < 1e-15);
        assert!((gradient_cosine(&g, &neg).unwrap() + 1.0).abs() < 1e-15);
        let a = vec![Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap(), Tensor::zeros(&[1, 2])];
        let b = vec![Tensor::zeros(&[1, 2]), Tensor::matrix(1, 2, vec![0.0, 3.0]).unwrap()];
        assert_eq!(gradient_cosine(&a, &b).unwrap(), 0.0);
        let z = vec![Tensor::zeros(&[1, 3])];
        assert_eq!(gradient_cosine(&g, &z), None);
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let a = vec![Tensor::matrix(1, 3, vec![0.3, 1.0, -0.2]).unwrap()];
        let b = vec![Tensor::matrix(1, 3, vec![-0.7, 0.4, 2.0]).unwrap()];
        let b5: Vec<Tensor> = b.iter().map(|t| t.map(|x| 5.0 * x)).collect();
        let c1 = gradient_cosine(&a, &b).unwrap();
        let c2 = gradient_cosine(&a, &b5).unwrap();
        assert!((c1 - c2).abs() < 1e-14);
    }
}
