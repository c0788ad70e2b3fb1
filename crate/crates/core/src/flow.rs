//! Interpolant, conditional velocity, the bootstrapped average-velocity
//! target and the decomposed, adaptively normalised loss.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::DataSampler;
use crate::error::{Error, Result};
use crate::net::{VelocityField, VelocityNet};
use crate::schedules::ScheduleState;
use crate::tensor_ad::{Eval, Ops, Tape, Tensor};

/// One minibatch of `(x, ε, t, r)` with everything derived from it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    pub x: Tensor,
    pub eps: Tensor,
    pub t: Vec<f64>,
    pub r: Vec<f64>,
    /// `(1 − t)·x + t·ε` row-wise.
    pub z: Tensor,
    /// `ε − x` row-wise.
    pub v_cond: Tensor,
    /// Regression target of the rows with `t = r`; equals `v_cond` unless
    /// corrupted.
    pub fm_target: Tensor,
    pub is_fm: Vec<bool>,
    pub labels: Option<Vec<usize>>,
}

impl TrainingBatch {
    pub fn from_parts(x: Tensor, eps: Tensor, t: Vec<f64>, r: Vec<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        if x.shape() != eps.shape() || x.rank() != 2 {
            return Err(Error::shape("training batch", x.shape(), eps.shape()));
        }
        let b = x.rows();
        if t.len() != b || r.len() != b {
            return Err(Error::shape("training batch times", &[t.len(), r.len()], &[b, b]));
        }
        if let Some(l) = &labels {
            if l.len() != b {
                return Err(Error::shape("training batch labels", &[l.len()], &[b]));
            }
        }
        for (i, (&ti, &ri)) in t.iter().zip(&r).enumerate() {
            if !(0.0 <= ri && ri <= ti && ti <= 1.0) {
                return Err(Error::config(format!("row {i}: need 0 <= r <= t <= 1, got r={ri}, t={ti}")));
            }
        }
        let mut z = x.clone();
        let mut v_cond = x.clone();
        for i in 0..b {
            let ti = t[i];
            for ((zv, vv), (&xv, &ev)) in z
                .row_mut(i)
                .iter_mut()
                .zip(v_cond.row_mut(i).iter_mut())
                .zip(x.row(i).iter().zip(eps.row(i)))
            {
                *zv = (1.0 - ti) * xv + ti * ev;
                *vv = ev - xv;
            }
        }
        let is_fm = t.iter().zip(&r).map(|(a, b)| a == b).collect();
        Ok(TrainingBatch {
            fm_target: v_cond.clone(),
            x,
            eps,
            t,
            r,
            z,
            v_cond,
            is_fm,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn gaps(&self) -> Vec<f64> {
        self.t.iter().zip(&self.r).map(|(t, r)| t - r).collect()
    }

    /// Replaces the flow-matching row targets with `v_cond + k·‖v_cond‖·g`.
    pub fn corrupt_fm_targets<R: Rng + ?Sized>(&mut self, k_noise: f64, rng: &mut R) {
        self.fm_target = corrupt_v_target(&self.v_cond, k_noise, rng);
    }
}

/// Draws a batch: data, unit Gaussian noise, then `(t, r)` from the schedule.
pub fn make_batch(
    data: &dyn DataSampler,
    rng: &mut dyn RngCore,
    batch: usize,
    sched: &ScheduleState,
) -> Result<TrainingBatch> {
    if batch == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let (x, labels) = data.sample(rng, batch)?;
    let d = x.cols();
    let noise: Vec<f64> = (0..batch * d).map(|_| rng.sample(StandardNormal)).collect();
    let eps = Tensor::matrix(batch, d, noise)?;
    let (t, r) = sched.sample_times(rng, batch)?;
    TrainingBatch::from_parts(x, eps, t, r, labels)
}

/// Target noise `v + k·‖v‖·g`, `g ~ N(0, I)` per row. `k = 0` draws nothing.
pub fn corrupt_v_target<R: Rng + ?Sized>(v_cond: &Tensor, k_noise: f64, rng: &mut R) -> Tensor {
    let mut out = v_cond.clone();
    if k_noise == 0.0 {
        return out;
    }
    for i in 0..out.rows() {
        let scale = k_noise * v_cond.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        for v in out.row_mut(i) {
            let g: f64 = rng.sample(StandardNormal);
            *v += scale * g;
        }
    }
    out
}

/// `u_tgt = v − (t − r)·(v·∂u/∂z + ∂u/∂t)`, detached. Rows with `t = r`
/// return `v_cond` exactly; the derivative is only evaluated on gap rows.
pub fn meanflow_target<F: VelocityField + ?Sized>(net: &F, batch: &TrainingBatch) -> Result<Tensor> {
    let mut target = batch.v_cond.clone();
    let gap_rows: Vec<usize> = (0..batch.len()).filter(|&i| !batch.is_fm[i]).collect();
    if gap_rows.is_empty() {
        return Ok(target);
    }
    let z = batch.z.select_rows(&gap_rows);
    let v = batch.v_cond.select_rows(&gap_rows);
    let r: Vec<f64> = gap_rows.iter().map(|&i| batch.r[i]).collect();
    let t: Vec<f64> = gap_rows.iter().map(|&i| batch.t[i]).collect();
    let labels: Option<Vec<usize>> = batch
        .labels
        .as_ref()
        .filter(|_| net.num_labels() > 0)
        .map(|l| gap_rows.iter().map(|&i| l[i]).collect());
    let (_, tangent) = net.eval_jvp(&z, &r, &t, &v, labels.as_deref())?;
    for (k, &i) in gap_rows.iter().enumerate() {
        let dt = batch.t[i] - batch.r[i];
        for ((o, &vv), &d) in target.row_mut(i).iter_mut().zip(v.row(k)).zip(tangent.row(k)) {
            *o = vv - dt * d;
        }
    }
    target.check_finite("meanflow target")?;
    Ok(target)
}

/// Adaptive normalisation `1 / (‖e‖² + c)^p`, applied as a constant.
pub fn adaptive_weight(sq_err: f64, c: f64, p: f64) -> f64 {
    1.0 / (sq_err + c).powf(p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossOptions {
    pub adp_c: f64,
    pub adp_p: f64,
    /// When false every adaptive weight is forced to 1.
    pub adaptive: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            adp_c: 1e-3,
            adp_p: 1.0,
            adaptive: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    /// Per-row regression error `u − target`.
    pub errors: Tensor,
    pub sq_errors: Vec<f64>,
    pub w_adp: Vec<f64>,
    /// α for flow-matching rows, β for gap rows.
    pub sched_weights: Vec<f64>,
    pub total: f64,
    pub u_part: f64,
    pub v_part: f64,
    pub mean_beta: Option<f64>,
    pub mean_alpha: Option<f64>,
}

/// Builds `mean(w ⊙ ‖u − target‖²)` on any backend. Returns the loss node
/// and the breakdown (with `total` read from the node).
fn weighted_loss<O: Ops>(
    ops: &mut O,
    u: &O::Value,
    targets: &Tensor,
    batch: &TrainingBatch,
    sched: &ScheduleState,
    opts: &LossOptions,
) -> Result<(O::Value, LossBreakdown)> {
    let target = ops.constant(targets.clone());
    let err = ops.sub(u, &target)?;
    let row_sq = ops.row_sq_norm(&err)?;
    let sq_errors = ops.primal(&row_sq).data().to_vec();
    let errors = ops.primal(&err).clone();
    let n = batch.len();
    let mut w_adp = Vec::with_capacity(n);
    let mut sched_weights = Vec::with_capacity(n);
    let (mut beta_sum, mut beta_n, mut alpha_sum, mut alpha_n) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        let w = if opts.adaptive {
            adaptive_weight(sq_errors[i], opts.adp_c, opts.adp_p)
        } else {
            1.0
        };
        let s = if batch.is_fm[i] {
            let a = sched.alpha(batch.t[i]);
            alpha_sum += a;
            alpha_n += 1;
            a
        } else {
            let b = sched.beta(batch.t[i] - batch.r[i]);
            beta_sum += b;
            beta_n += 1;
            b
        };
        w_adp.push(w);
        sched_weights.push(s);
    }
    let combined: Vec<f64> = w_adp.iter().zip(&sched_weights).map(|(a, b)| a * b).collect();
    let weights = ops.constant(Tensor::column(&combined));
    let weighted = ops.mul(&weights, &row_sq)?;
    let loss = ops.mean(&weighted);
    let total = ops.primal(&loss).item()?;
    if !total.is_finite() {
        return Err(Error::NumericFault(format!("batch loss is {total}")));
    }
    let (mut u_part, mut v_part) = (0.0, 0.0);
    for i in 0..n {
        let term = combined[i] * sq_errors[i];
        if batch.is_fm[i] {
            v_part += term;
        } else {
            u_part += term;
        }
    }
    let breakdown = LossBreakdown {
        errors,
        sq_errors,
        w_adp,
        sched_weights,
        total,
        u_part: u_part / n as f64,
        v_part: v_part / n as f64,
        mean_beta: (beta_n > 0).then(|| beta_sum / beta_n as f64),
        mean_alpha: (alpha_n > 0).then(|| alpha_sum / alpha_n as f64),
    };
    Ok((loss, breakdown))
}

/// Per-row regression targets: the flow-matching target on `t = r` rows and
/// the detached average-velocity target elsewhere.
pub fn loss_targets(net: &VelocityNet, batch: &TrainingBatch) -> Result<Tensor> {
    let mut targets = meanflow_target(net, batch)?;
    for i in 0..batch.len() {
        if batch.is_fm[i] {
            targets.row_mut(i).copy_from_slice(batch.fm_target.row(i));
        }
    }
    Ok(targets)
}

fn net_labels<'a>(net: &VelocityNet, batch: &'a TrainingBatch) -> Option<&'a [usize]> {
    if net.config().num_labels > 0 {
        batch.labels.as_deref()
    } else {
        None
    }
}

/// Loss value without gradients.
pub fn meanflow_loss(
    net: &VelocityNet,
    batch: &TrainingBatch,
    sched: &ScheduleState,
    opts: &LossOptions,
) -> Result<LossBreakdown> {
    let targets = loss_targets(net, batch)?;
    let u = net.eval(&batch.z, &batch.r, &batch.t, net_labels(net, batch))?;
    let (_, breakdown) = weighted_loss(&mut Eval, &u, &targets, batch, sched, opts)?;
    Ok(breakdown)
}

/// Loss value and its parameter gradient. Targets and adaptive weights enter
/// the tape as constants.
pub fn meanflow_loss_grad(
    net: &VelocityNet,
    batch: &TrainingBatch,
    sched: &ScheduleState,
    opts: &LossOptions,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let targets = loss_targets(net, batch)?;
    let mut tape = Tape::new();
    let (u, params) = net.record(&mut tape, &batch.z, &batch.r, &batch.t, net_labels(net, batch))?;
    let (loss, breakdown) = weighted_loss(&mut tape, &u, &targets, batch, sched, opts)?;
    let grads = tape.grad(loss, &params)?;
    Ok((breakdown, grads))
}

/// `z_r = z_t − (t − r)·u(z_t, r, t)`, row-wise.
pub fn one_step_update<F: VelocityField + ?Sized>(
    net: &F,
    z_t: &Tensor,
    r: &[f64],
    t: &[f64],
    labels: Option<&[usize]>,
) -> Result<Tensor> {
    if let Some(i) = r.iter().zip(t).position(|(r, t)| r > t) {
        return Err(Error::config(format!("one-step update needs r <= t (row {i})")));
    }
    net.mean_step(z_t, r, t, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adaptive_weight_example() {
        let w = adaptive_weight(1.0, 1e-3, 1.0);
        assert!((w - 1.0 / 1.001).abs() < 1e-15);
        assert!((w - 0.999001).abs() < 1e-6);
    }

    #[test]
    fn interpolant_endpoints_are_exact() {
        let x = Tensor::matrix(2, 2, vec![0.3, -0.7, 1.1, 2.5]).unwrap();
        let e = Tensor::matrix(2, 2, vec![-1.3, 0.2, 0.9, -0.4]).unwrap();
        let b = TrainingBatch::from_parts(x.clone(), e.clone(), vec![0.0, 1.0], vec![0.0, 0.5], None).unwrap();
        assert_eq!(b.z.row(0), x.row(0));
        assert_eq!(b.z.row(1), e.row(1));
        assert_eq!(b.is_fm, vec![true, false]);
    }

    #[test]
    fn batch_rejects_r_above_t() {
        let x = Tensor::zeros(&[1, 2]);
        assert!(TrainingBatch::from_parts(x.clone(), x, vec![0.3], vec![0.5], None).is_err());
    }

    #[test]
    fn corruption_with_zero_scale_is_identity() {
        use rand::SeedableRng;
        let v = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert_eq!(corrupt_v_target(&v, 0.0, &mut rng), v);
    }
}
