use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64` values.
///
/// The element count always equals the product of `shape`; a scalar has an
/// empty shape and a single element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::new(raw.shape, raw.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::shape("new", &shape, &[]))?;
        if expected != data.len() {
            return Err(Error::shape("new", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a `rows × cols` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Column vector `n × 1`.
    pub fn column(values: &[f64]) -> Self {
        Tensor {
            shape: vec![values.len(), 1],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::NotScalar(self.shape.clone()))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NumericFault(format!(
                "{what}: non-finite value {} at flat index {i}",
                self.data[i]
            ))),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// Selects rows of a rank-2 tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![idx.len(), c],
            data,
        }
    }

    /// Stacks rank-2 tensors with equal column counts vertically.
    pub fn vstack(parts: &[Tensor]) -> Result<Tensor> {
        let cols = parts.first().map(|p| p.cols()).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.rank() != 2 || p.cols() != cols {
                return Err(Error::shape("vstack", &parts[0].shape, &p.shape));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: vec![rows, cols],
            data,
        })
    }
}

pub(crate) fn require_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::shape(op, &t.shape, &[]));
    }
    Ok((t.shape[0], t.shape[1]))
}

/// `C = op(A) · op(B)` through `matrixmultiply`, where `op` is an optional
/// transpose expressed purely through strides.
pub(crate) fn gemm(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let (ar, ac) = require_rank2("matmul", a)?;
    let (br, bc) = require_rank2("matmul", b)?;
    let (m, k, rsa, csa) = if trans_a {
        (ac, ar, 1isize, ac as isize)
    } else {
        (ar, ac, ac as isize, 1isize)
    };
    let (k2, n, rsb, csb) = if trans_b {
        (bc, br, 1isize, bc as isize)
    } else {
        (br, bc, bc as isize, 1isize)
    };
    if k != k2 {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let mut out = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: the pointers cover `m*k`, `k*n` and `m*n` elements with the
        // strides computed above, all of which lie inside the owned buffers.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

pub(crate) fn add_row(a: &Tensor, row: &Tensor) -> Result<Tensor> {
    let (r, c) = require_rank2("add_row", a)?;
    if row.len() != c || row.rows() != 1 {
        return Err(Error::shape("add_row", &a.shape, &row.shape));
    }
    let mut out = a.clone();
    for i in 0..r {
        for (o, &b) in out.row_mut(i).iter_mut().zip(&row.data) {
            *o += b;
        }
    }
    Ok(out)
}

/// Column sums of a rank-2 tensor as a `1 × cols` row.
pub(crate) fn col_sums(a: &Tensor) -> Tensor {
    let c = a.cols();
    let mut out = vec![0.0; c];
    for i in 0..a.rows() {
        for (o, &v) in out.iter_mut().zip(a.row(i)) {
            *o += v;
        }
    }
    Tensor {
        shape: vec![1, c],
        data: out,
    }
}

pub(crate) fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat", &[], &[]))?;
    let rows = require_rank2("concat", first)?.0;
    let mut total = 0;
    for p in parts {
        let (r, c) = require_rank2("concat", p)?;
        if r != rows {
            return Err(Error::shape("concat", &first.shape, &p.shape));
        }
        total += c;
    }
    let mut data = Vec::with_capacity(rows * total);
    for i in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Ok(Tensor {
        shape: vec![rows, total],
        data,
    })
}

/// Splits the gradient of a column concatenation back into its parts.
pub(crate) fn split_cols(g: &Tensor, widths: &[usize]) -> Vec<Tensor> {
    let rows = g.rows();
    let mut outs: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
    for i in 0..rows {
        let row = g.row(i);
        let mut off = 0;
        for (o, &w) in outs.iter_mut().zip(widths) {
            o.extend_from_slice(&row[off..off + w]);
            off += w;
        }
    }
    outs.into_iter()
        .zip(widths)
        .map(|(data, &w)| Tensor {
            shape: vec![rows, w],
            data,
        })
        .collect()
}

pub(crate) fn row_sq_norm(a: &Tensor) -> Result<Tensor> {
    let (r, _) = require_rank2("row_sq_norm", a)?;
    let data = (0..r)
        .map(|i| a.row(i).iter().map(|x| x * x).sum())
        .collect();
    Ok(Tensor {
        shape: vec![r, 1],
        data,
    })
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}
