use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_ad::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moments plus the step count used for bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One Adam update with bias correction, in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, hp: &AdamParams) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::shape("adam_step", &[params.len()], &[grads.len()]));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let bc1 = 1.0 - hp.beta1.powf(state.step as f64);
    let bc2 = 1.0 - hp.beta2.powf(state.step as f64);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = hp.beta1 * *mv + (1.0 - hp.beta1) * gv;
            *vv = hp.beta2 * *vv + (1.0 - hp.beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales `grads` so their joint norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp(lr: f64) -> AdamParams {
        AdamParams {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = vec![Tensor::matrix(1, 2, vec![0.5, -1.0]).unwrap()];
        let mut st = AdamState::zeros_like(&p);
        st.m[0].data_mut().copy_from_slice(&[1.0, 2.0]);
        st.v[0].data_mut().copy_from_slice(&[4.0, 4.0]);
        st.step = 10;
        let g = vec![Tensor::zeros(&[1, 2])];
        let before = p.clone();
        // Zero gradient with non-zero moments still moves params; fresh state
        // does not.
        let mut fresh = AdamState::zeros_like(&p);
        adam_step(&mut p, &g, &mut fresh, &hp(0.1)).unwrap();
        assert_eq!(p, before);
        assert_eq!(fresh.m[0].data(), &[0.0, 0.0]);
        adam_step(&mut p, &g, &mut st, &hp(0.1)).unwrap();
        assert_eq!(st.m[0].data(), &[0.9, 1.8]);
        assert!((st.v[0].data()[0] - 4.0 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::scalar(3.0)];
        let mut st = AdamState::zeros_like(&p);
        adam_step(&mut p, &[Tensor::scalar(1.0)], &mut st, &hp(0.1)).unwrap();
        assert!((p[0].item().unwrap() - 2.9).abs() < 1e-6);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap()];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        let mut small = vec![Tensor::matrix(1, 2, vec![0.3, 0.4]).unwrap()];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.3, 0.4]);
    }
}
