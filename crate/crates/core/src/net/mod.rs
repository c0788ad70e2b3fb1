//! The velocity model `u(z, r, t)`: an MLP over the data point, sinusoidal
//! embeddings of both times, and an optional class-label embedding.

mod checkpoint;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_ad::{self, DualTensor, Ops, Program, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Data dimensionality `D`; also the output width.
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    /// Width of each time embedding (half sines, half cosines).
    pub time_embed_dim: usize,
    /// Largest embedding frequency; frequencies are log-spaced from 1.
    pub max_freq: f64,
    /// Number of class labels; 0 means unconditional.
    pub num_labels: usize,
    pub label_embed_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            data_dim: 2,
            hidden: vec![256, 256, 256],
            time_embed_dim: 64,
            max_freq: 1000.0,
            num_labels: 0,
            label_embed_dim: 16,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 {
            return Err(Error::config("net.data_dim must be positive"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("net.hidden must be a non-empty list of positive widths"));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::config("net.time_embed_dim must be an even number >= 2"));
        }
        if !(self.max_freq >= 1.0 && self.max_freq.is_finite()) {
            return Err(Error::config("net.max_freq must be finite and >= 1"));
        }
        if self.num_labels > 0 && self.label_embed_dim == 0 {
            return Err(Error::config("net.label_embed_dim must be positive for conditional nets"));
        }
        Ok(())
    }

    fn input_width(&self) -> usize {
        let label = if self.num_labels > 0 { self.label_embed_dim } else { 0 };
        self.data_dim + 2 * self.time_embed_dim + label
    }

    /// Shapes of every parameter tensor, in storage order: weight/bias pairs
    /// per layer, then the label table when conditional.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut fan_in = self.input_width();
        for &w in self.hidden.iter().chain(std::iter::once(&self.data_dim)) {
            shapes.push(vec![fan_in, w]);
            shapes.push(vec![1, w]);
            fan_in = w;
        }
        if self.num_labels > 0 {
            shapes.push(vec![self.num_labels, self.label_embed_dim]);
        }
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    fn frequencies(&self) -> Tensor {
        let half = self.time_embed_dim / 2;
        let ln_max = self.max_freq.ln();
        let data = (0..half)
            .map(|k| {
                if half == 1 {
                    1.0
                } else {
                    (ln_max * k as f64 / (half - 1) as f64).exp()
                }
            })
            .collect();
        Tensor::new(vec![1, half], data).expect("frequency row shape")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNet")]
pub struct VelocityNet {
    config: NetConfig,
    params: Vec<Tensor>,
    #[serde(skip)]
    freqs: Tensor,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNet {
    config: NetConfig,
    params: Vec<Tensor>,
}

impl TryFrom<RawNet> for VelocityNet {
    type Error = Error;

    fn try_from(raw: RawNet) -> Result<Self> {
        VelocityNet::from_params(raw.config, raw.params)
    }
}

/// Fills a `rows × cols` matrix with orthonormal rows or columns (whichever
/// is the shorter side) via modified Gram-Schmidt on Gaussian draws.
fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let (n, m) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    // m vectors of length n
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    while basis.len() < m {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let mut data = vec![0.0; rows * cols];
    for (j, b) in basis.iter().enumerate() {
        for (i, &x) in b.iter().enumerate() {
            if rows >= cols {
                data[i * cols + j] = x;
            } else {
                data[j * cols + i] = x;
            }
        }
    }
    Tensor::new(vec![rows, cols], data).expect("orthogonal shape")
}

impl VelocityNet {
    /// Hidden layers get orthogonal weights, biases start at zero, and the
    /// output layer is all zeros so the initial field is identically zero.
    pub fn init<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        let n_layers = config.hidden.len() + 1;
        let mut params = Vec::with_capacity(shapes.len());
        for (i, shape) in shapes.iter().enumerate() {
            let is_weight = i < 2 * n_layers && i % 2 == 0;
            let is_output = i / 2 == n_layers - 1 && i < 2 * n_layers;
            let p = if i >= 2 * n_layers {
                // label table
                let data = (0..shape[0] * shape[1]).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                Tensor::new(shape.clone(), data)?
            } else if is_weight && !is_output {
                orthogonal(shape[0], shape[1], rng)
            } else {
                Tensor::zeros(shape)
            };
            params.push(p);
        }
        Self::from_params(config, params)
    }

    pub fn from_params(config: NetConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors, found {}",
                shapes.len(),
                params.len()
            )));
        }
        for (i, (s, p)) in shapes.iter().zip(&params).enumerate() {
            if s.as_slice() != p.shape() {
                return Err(Error::config(format!(
                    "parameter {i} has shape {:?}, config expects {s:?}",
                    p.shape()
                )));
            }
            p.check_finite("parameter")?;
        }
        let freqs = config.frequencies();
        Ok(VelocityNet { config, params, freqs })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    /// Validates a batch and assembles the program inputs `[z, r, t, onehot?]`.
    fn inputs(&self, z: &Tensor, r: &[f64], t: &[f64], labels: Option<&[usize]>) -> Result<Vec<Tensor>> {
        let d = self.config.data_dim;
        if z.rank() != 2 || z.cols() != d {
            return Err(Error::shape("velocity net input", z.shape(), &[z.rows(), d]));
        }
        let b = z.rows();
        if r.len() != b || t.len() != b {
            return Err(Error::shape("velocity net times", &[r.len(), t.len()], &[b, b]));
        }
        let mut inputs = vec![z.clone(), Tensor::column(r), Tensor::column(t)];
        match (self.config.num_labels, labels) {
            (0, None) => {}
            (0, Some(_)) => {
                return Err(Error::config("label provided to an unconditional velocity net"));
            }
            (_, None) => {
                return Err(Error::config("conditional velocity net requires labels"));
            }
            (n, Some(ls)) => {
                if ls.len() != b {
                    return Err(Error::shape("velocity net labels", &[ls.len()], &[b]));
                }
                let mut onehot = Tensor::zeros(&[b, n]);
                for (i, &l) in ls.iter().enumerate() {
                    if l >= n {
                        return Err(Error::config(format!("label {l} out of range for {n} classes")));
                    }
                    onehot.row_mut(i)[l] = 1.0;
                }
                inputs.push(onehot);
            }
        }
        Ok(inputs)
    }

    /// Batched evaluation of `u(z, r, t)`; row `i` uses `r[i]`, `t[i]`.
    pub fn eval(&self, z: &Tensor, r: &[f64], t: &[f64], labels: Option<&[usize]>) -> Result<Tensor> {
        let inputs = self.inputs(z, r, t, labels)?;
        tensor_ad::forward(self, &inputs, &self.params)
    }

    /// Evaluates the field and its derivative along `(dz, dr, dt) = (seed_v, 0, 1)`,
    /// i.e. `seed_v · ∂u/∂z + ∂u/∂t`.
    pub fn eval_jvp(
        &self,
        z: &Tensor,
        r: &[f64],
        t: &[f64],
        seed_v: &Tensor,
        labels: Option<&[usize]>,
    ) -> Result<(Tensor, Tensor)> {
        let mut inputs = self.inputs(z, r, t, labels)?.into_iter();
        let b = z.rows();
        let mut duals = vec![
            DualTensor::new(inputs.next().expect("z"), seed_v.clone())?,
            DualTensor::new(inputs.next().expect("r"), Tensor::zeros(&[b, 1]))?,
            DualTensor::new(inputs.next().expect("t"), Tensor::full(&[b, 1], 1.0))?,
        ];
        duals.extend(inputs.map(DualTensor::constant));
        let out = tensor_ad::jvp(self, &duals, &self.params)?;
        Ok(out.into_parts())
    }

    /// Records a batched evaluation on `tape`, returning the output node and
    /// the parameter slots in storage order.
    pub fn record(
        &self,
        tape: &mut Tape,
        z: &Tensor,
        r: &[f64],
        t: &[f64],
        labels: Option<&[usize]>,
    ) -> Result<(Var, Vec<Var>)> {
        let inputs = self.inputs(z, r, t, labels)?;
        tape.record(self, &inputs, &self.params)
    }
}

/// Anything that can play the role of `u(z, r, t)`: the trained network or
/// a closed-form field used as an oracle.
pub trait VelocityField {
    fn data_dim(&self) -> usize;
    fn num_labels(&self) -> usize {
        0
    }
    fn eval(&self, z: &Tensor, r: &[f64], t: &[f64], labels: Option<&[usize]>) -> Result<Tensor>;
    /// Value and `seed_v · ∂u/∂z + ∂u/∂t`.
    fn eval_jvp(
        &self,
        z: &Tensor,
        r: &[f64],
        t: &[f64],
        seed_v: &Tensor,
        labels: Option<&[usize]>,
    ) -> Result<(Tensor, Tensor)>;
    /// `z_r = z_t − (t − r)·u(z_t, r, t)`. Fields with a closed-form flow
    /// map may override this.
    fn mean_step(&self, z: &Tensor, r: &[f64], t: &[f64], labels: Option<&[usize]>) -> Result<Tensor> {
        let u = self.eval(z, r, t, labels)?;
        let mut out = z.clone();
        for i in 0..out.rows() {
            let dt = t[i] - r[i];
            for (o, &uv) in out.row_mut(i).iter_mut().zip(u.row(i)) {
                *o -= dt * uv;
            }
        }
        Ok(out)
    }
}

impl VelocityField for VelocityNet {
    fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    fn num_labels(&self) -> usize {
        self.config.num_labels
    }

    fn eval(&self, z: &Tensor, r: &[f64], t: &[f64], labels: Option<&[usize]>) -> Result<Tensor> {
        VelocityNet::eval(self, z, r, t, labels)
    }

    fn eval_jvp(
        &self,
        z: &Tensor,
        r: &[f64],
        t: &[f64],
        seed_v: &Tensor,
        labels: Option<&[usize]>,
    ) -> Result<(Tensor, Tensor)> {
        VelocityNet::eval_jvp(self, z, r, t, seed_v, labels)
    }
}

/// Exact average velocity of a one-point dataset `{x}`: every path is a
/// straight line with constant velocity, so `u(z, r, t) = (z − x)/t`.
#[derive(Clone, Debug, PartialEq)]
pub struct SingleDatumField {
    pub x: Vec<f64>,
}

impl VelocityField for SingleDatumField {
    fn data_dim(&self) -> usize {
        self.x.len()
    }

    fn eval(&self, z: &Tensor, _r: &[f64], t: &[f64], _labels: Option<&[usize]>) -> Result<Tensor> {
        if z.cols() != self.x.len() || t.len() != z.rows() {
            return Err(Error::shape("single-datum field", z.shape(), &[t.len(), self.x.len()]));
        }
        let mut out = z.clone();
        for (i, &ti) in t.iter().enumerate() {
            for (o, &xv) in out.row_mut(i).iter_mut().zip(&self.x) {
                *o = (*o - xv) / ti;
            }
        }
        out.check_finite("single-datum field")?;
        Ok(out)
    }

    fn eval_jvp(
        &self,
        z: &Tensor,
        r: &[f64],
        t: &[f64],
        seed_v: &Tensor,
        labels: Option<&[usize]>,
    ) -> Result<(Tensor, Tensor)> {
        let u = self.eval(z, r, t, labels)?;
        // d/dz (z − x)/t · v = v/t ;  d/dt = −(z − x)/t²
        let mut tangent = seed_v.clone();
        for (i, &ti) in t.iter().enumerate() {
            for (o, &uv) in tangent.row_mut(i).iter_mut().zip(u.row(i)) {
                *o = *o / ti - uv / ti;
            }
        }
        Ok((u, tangent))
    }

    /// Exact flow map `x + (r/t)(z − x)`; lands on `x` bit-for-bit at `r = 0`.
    fn mean_step(&self, z: &Tensor, r: &[f64], t: &[f64], _labels: Option<&[usize]>) -> Result<Tensor> {
        if z.cols() != self.x.len() || t.len() != z.rows() || r.len() != z.rows() {
            return Err(Error::shape("single-datum field", z.shape(), &[t.len(), self.x.len()]));
        }
        let mut out = z.clone();
        for i in 0..out.rows() {
            let ratio = r[i] / t[i];
            for (o, &xv) in out.row_mut(i).iter_mut().zip(&self.x) {
                *o = xv + ratio * (*o - xv);
            }
        }
        out.check_finite("single-datum field")?;
        Ok(out)
    }
}

impl Program for VelocityNet {
    fn run<O: Ops>(&self, ops: &mut O, inputs: &[O::Value], params: &[O::Value]) -> Result<O::Value> {
        let freqs = ops.constant(self.freqs.clone());
        let embed = |ops: &mut O, time: &O::Value| -> Result<O::Value> {
            let phase = ops.matmul(time, &freqs)?;
            let s = ops.sin(&phase);
            let c = ops.cos(&phase);
            ops.concat(&[s, c])
        };
        let et = embed(ops, &inputs[2])?;
        let er = embed(ops, &inputs[1])?;
        let mut parts = vec![inputs[0].clone(), et, er];
        let n_layers = self.config.hidden.len() + 1;
        if self.config.num_labels > 0 {
            parts.push(ops.matmul(&inputs[3], &params[2 * n_layers])?);
        }
        let mut h = ops.concat(&parts)?;
        for layer in 0..n_layers {
            let lin = ops.matmul(&h, &params[2 * layer])?;
            h = ops.add_row(&lin, &params[2 * layer + 1])?;
            if layer + 1 < n_layers {
                h = ops.silu(&h);
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> NetConfig {
        NetConfig {
            hidden: vec![16, 16],
            time_embed_dim: 8,
            ..NetConfig::default()
        }
    }

    #[test]
    fn zero_output_layer_gives_zero_field_and_tangent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = VelocityNet::init(small(), &mut rng).unwrap();
        let z = Tensor::matrix(3, 2, vec![0.3, -1.0, 2.0, 0.5, -0.7, 0.1]).unwrap();
        let r = [0.0, 0.2, 0.5];
        let t = [0.5, 0.9, 0.5];
        let out = net.eval(&z, &r, &t, None).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
        let (v, tan) = net.eval_jvp(&z, &r, &t, &z, None).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
        assert!(tan.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn degenerate_gap_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = VelocityNet::init(small(), &mut rng).unwrap();
        let n = net.params().len();
        net.params_mut()[n - 2] = Tensor::full(&[16, 2], 0.1);
        for t in [0.0, 0.5, 1.0] {
            let z = Tensor::matrix(1, 2, vec![0.4, -0.2]).unwrap();
            let out = net.eval(&z, &[t], &[t], None).unwrap();
            assert!(out.is_finite());
        }
    }

    #[test]
    fn default_param_count_golden() {
        // 130 -> 256 -> 256 -> 256 -> 2 with biases
        assert_eq!(NetConfig::default().param_count(), 165_634);
    }

    #[test]
    fn label_conditioning_is_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Tensor::zeros(&[2, 2]);
        let net = VelocityNet::init(small(), &mut rng).unwrap();
        assert!(net.eval(&z, &[0.1, 0.2], &[0.3, 0.4], Some(&[0, 1])).is_err());
        let cond = VelocityNet::init(
            NetConfig {
                num_labels: 3,
                ..small()
            },
            &mut rng,
        )
        .unwrap();
        assert!(cond.eval(&z, &[0.1, 0.2], &[0.3, 0.4], None).is_err());
        assert!(cond.eval(&z, &[0.1, 0.2], &[0.3, 0.4], Some(&[0, 3])).is_err());
        assert!(cond.eval(&z, &[0.1, 0.2], &[0.3, 0.4], Some(&[0, 2])).is_ok());
    }

    #[test]
    fn orthogonal_columns_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = orthogonal(10, 4, &mut rng);
        for a in 0..4 {
            for b in 0..4 {
                let dot: f64 = (0..10).map(|i| w.data()[i * 4 + a] * w.data()[i * 4 + b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_dimension_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = VelocityNet::init(small(), &mut rng).unwrap();
        let z = Tensor::zeros(&[2, 3]);
        assert!(matches!(net.eval(&z, &[0.0, 0.0], &[1.0, 1.0], None), Err(Error::Shape { .. })));
    }
}
