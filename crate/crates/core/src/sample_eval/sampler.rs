use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::one_step_update;
use crate::net::VelocityField;
use crate::tensor_ad::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMode {
    /// Chains average-velocity jumps `z_r = z_t − (t − r)·u(z_t, r, t)`.
    MeanStep,
    /// Forward Euler on `dz/dt = u(z, t, t)`.
    EulerV,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerSpec {
    mode: SamplerMode,
    grid: Vec<f64>,
}

impl SamplerSpec {
    /// Uniform grid from 1 to 0 with `nfe` steps.
    pub fn uniform(mode: SamplerMode, nfe: usize) -> Result<Self> {
        if nfe == 0 {
            return Err(Error::config("sampler needs at least one function evaluation"));
        }
        let mut grid: Vec<f64> = (0..=nfe).map(|i| 1.0 - i as f64 / nfe as f64).collect();
        grid[0] = 1.0;
        grid[nfe] = 0.0;
        Ok(SamplerSpec { mode, grid })
    }

    pub fn with_grid(mode: SamplerMode, grid: Vec<f64>) -> Result<Self> {
        if grid.len() < 2 || grid[0] != 1.0 || grid[grid.len() - 1] != 0.0 {
            return Err(Error::config("sampler grid must start at 1 and end at 0"));
        }
        if grid.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::config("sampler grid must be strictly decreasing"));
        }
        Ok(SamplerSpec { mode, grid })
    }

    pub fn mode(&self) -> SamplerMode {
        self.mode
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn nfe(&self) -> usize {
        self.grid.len() - 1
    }
}

/// How class labels are chosen for a conditional field.
#[derive(Clone, Debug, PartialEq)]
pub enum LabelPolicy {
    None,
    Uniform(usize),
    Given(Vec<usize>),
}

/// Pushes `n` draws of `ε ~ N(0, I)` from `t = 1` to `t = 0`.
pub fn sample<F: VelocityField + ?Sized>(
    field: &F,
    spec: &SamplerSpec,
    n: usize,
    rng: &mut dyn RngCore,
    labels: &LabelPolicy,
) -> Result<Tensor> {
    let d = field.data_dim();
    let noise: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    let eps = Tensor::matrix(n, d, noise)?;
    let labels = match labels {
        LabelPolicy::None => None,
        LabelPolicy::Uniform(k) => Some((0..n).map(|_| rng.gen_range(0..*k)).collect()),
        LabelPolicy::Given(l) => Some(l.clone()),
    };
    integrate(field, spec, eps, labels.as_deref())
}

/// Runs the sampler from a given starting cloud at `t = 1`.
pub fn integrate<F: VelocityField + ?Sized>(
    field: &F,
    spec: &SamplerSpec,
    start: Tensor,
    labels: Option<&[usize]>,
) -> Result<Tensor> {
    let n = start.rows();
    let mut z = start;
    for w in spec.grid.windows(2) {
        let (t, r) = (w[0], w[1]);
        let tv = vec![t; n];
        z = match spec.mode {
            SamplerMode::MeanStep => one_step_update(field, &z, &vec![r; n], &tv, labels)?,
            SamplerMode::EulerV => {
                let v = field.eval(&z, &tv, &tv, labels)?;
                let mut next = z;
                for (o, &vv) in next.data_mut().iter_mut().zip(v.data()) {
                    *o -= (t - r) * vv;
                }
                next
            }
        };
    }
    z.check_finite("sampler output")?;
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        let s = SamplerSpec::uniform(SamplerMode::MeanStep, 1).unwrap();
        assert_eq!(s.grid(), &[1.0, 0.0]);
        let s = SamplerSpec::uniform(SamplerMode::EulerV, 32).unwrap();
        assert_eq!(s.nfe(), 32);
        assert!(s.grid().windows(2).all(|w| w[1] < w[0]));
        assert!(SamplerSpec::with_grid(SamplerMode::MeanStep, vec![1.0, 0.5, 0.5, 0.0]).is_err());
        assert!(SamplerSpec::with_grid(SamplerMode::MeanStep, vec![0.9, 0.0]).is_err());
        assert!(SamplerSpec::uniform(SamplerMode::MeanStep, 0).is_err());
    }
}
