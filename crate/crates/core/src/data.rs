//! Synthetic 2-D data tasks.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_ad::Tensor;

/// Source of data points (and optional class labels).
pub trait DataSampler: Send + Sync {
    fn dim(&self) -> usize;
    /// Number of classes; 0 when the task carries no labels.
    fn num_labels(&self) -> usize;
    fn sample(&self, rng: &mut dyn RngCore, n: usize) -> Result<(Tensor, Option<Vec<usize>>)>;
    /// Draws with reduced variance across mixture components, used for
    /// evaluation clouds. Defaults to plain sampling.
    fn sample_stratified(&self, rng: &mut dyn RngCore, n: usize) -> Result<(Tensor, Option<Vec<usize>>)> {
        self.sample(rng, n)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    TwoMoons,
    Gauss8,
    Checkerboard,
    Spiral,
    SingleDatum,
}

/// The point the single-datum task always returns.
pub const SINGLE_DATUM: [f64; 2] = [1.0, -0.5];

pub const GAUSS8_RADIUS: f64 = 2.0;
pub const GAUSS8_STD: f64 = 0.1;

impl Task {
    pub const ALL: [Task; 5] = [
        Task::TwoMoons,
        Task::Gauss8,
        Task::Checkerboard,
        Task::Spiral,
        Task::SingleDatum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::TwoMoons => "two-moons",
            Task::Gauss8 => "gauss8",
            Task::Checkerboard => "checkerboard",
            Task::Spiral => "spiral",
            Task::SingleDatum => "single-datum",
        }
    }

    pub fn parse(name: &str) -> Result<Task> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == name)
            .ok_or_else(|| {
                let names: Vec<&str> = Task::ALL.iter().map(|t| t.name()).collect();
                Error::config(format!("unknown task '{name}'; valid tasks: {}", names.join(", ")))
            })
    }
}

impl DataSampler for Task {
    fn dim(&self) -> usize {
        2
    }

    fn num_labels(&self) -> usize {
        match self {
            Task::Gauss8 => 8,
            Task::TwoMoons => 2,
            _ => 0,
        }
    }

    fn sample(&self, rng: &mut dyn RngCore, n: usize) -> Result<(Tensor, Option<Vec<usize>>)> {
        let u: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        self.draw(rng, &u)
    }

    /// One draw per stratum `[i/n, (i+1)/n)` of the component selector, so
    /// mixture weights are matched up to one point; rows are shuffled.
    fn sample_stratified(&self, rng: &mut dyn RngCore, n: usize) -> Result<(Tensor, Option<Vec<usize>>)> {
        let mut u: Vec<f64> = (0..n).map(|i| (i as f64 + rng.gen::<f64>()) / n as f64).collect();
        u.shuffle(rng);
        self.draw(rng, &u)
    }
}

impl Task {
    /// One point per entry of `u`, which selects the mixture component (or
    /// the position along the curve); remaining randomness comes from `rng`.
    fn draw(&self, rng: &mut dyn RngCore, u: &[f64]) -> Result<(Tensor, Option<Vec<usize>>)> {
        let n = u.len();
        let mut data = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        for &u in u {
            let (p, label) = match self {
                Task::Gauss8 => {
                    let k = ((8.0 * u) as usize).min(7);
                    let angle = 2.0 * PI * k as f64 / 8.0;
                    let nx: f64 = rng.sample(StandardNormal);
                    let ny: f64 = rng.sample(StandardNormal);
                    (
                        [
                            GAUSS8_RADIUS * angle.cos() + GAUSS8_STD * nx,
                            GAUSS8_RADIUS * angle.sin() + GAUSS8_STD * ny,
                        ],
                        k,
                    )
                }
                Task::TwoMoons => {
                    let upper = u < 0.5;
                    let theta = PI * (2.0 * u).fract();
                    let (x, y) = if upper {
                        (theta.cos(), theta.sin())
                    } else {
                        (1.0 - theta.cos(), 0.5 - theta.sin())
                    };
                    let nx: f64 = rng.sample(StandardNormal);
                    let ny: f64 = rng.sample(StandardNormal);
                    (
                        [1.5 * (x - 0.5) + 0.05 * nx, 1.5 * (y - 0.25) + 0.05 * ny],
                        usize::from(!upper),
                    )
                }
                Task::Checkerboard => {
                    // 4x4 board on [-2, 2]^2; only cells with even (i + j) are filled
                    let cell = ((8.0 * u) as usize).min(7);
                    let row = cell / 2;
                    let col = 2 * (cell % 2) + (row % 2);
                    let x = -2.0 + col as f64 + rng.gen::<f64>();
                    let y = -2.0 + row as f64 + rng.gen::<f64>();
                    ([x, y], 0)
                }
                Task::Spiral => {
                    let theta = 3.0 * PI * u.sqrt();
                    let rad = 2.0 * theta / (3.0 * PI);
                    let nx: f64 = rng.sample(StandardNormal);
                    let ny: f64 = rng.sample(StandardNormal);
                    ([rad * theta.cos() + 0.05 * nx, rad * theta.sin() + 0.05 * ny], 0)
                }
                Task::SingleDatum => (SINGLE_DATUM, 0),
            };
            data.extend_from_slice(&p);
            labels.push(label);
        }
        let x = Tensor::matrix(n, 2, data)?;
        Ok((x, (self.num_labels() > 0).then_some(labels)))
    }
}

/// Uniform draws from a finite point set.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalSampler {
    dim: usize,
    points: Vec<Vec<f64>>,
}

impl EmpiricalSampler {
    pub fn new(dim: usize, points: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(p) = points.iter().find(|p| p.len() != dim) {
            return Err(Error::shape("empirical sampler", &[p.len()], &[dim]));
        }
        Ok(EmpiricalSampler { dim, points })
    }
}

impl DataSampler for EmpiricalSampler {
    fn dim(&self) -> usize {
        self.dim
    }

    fn num_labels(&self) -> usize {
        0
    }

    fn sample(&self, rng: &mut dyn RngCore, n: usize) -> Result<(Tensor, Option<Vec<usize>>)> {
        if self.points.is_empty() {
            return Err(Error::config("data sampler has empty support"));
        }
        let mut data = Vec::with_capacity(n * self.dim);
        for _ in 0..n {
            let i = rng.gen_range(0..self.points.len());
            data.extend_from_slice(&self.points[i]);
        }
        Ok((Tensor::matrix(n, self.dim, data)?, None))
    }
}
