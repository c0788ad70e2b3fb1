use super::tensor::{self, Tensor};
use crate::error::Result;

/// The closed operation set every backend implements.
///
/// A computation written once against `Ops` can be evaluated plainly
/// ([`Eval`]), with forward-mode tangents ([`super::Dual`]) or recorded for
/// reverse-mode gradients ([`super::Tape`]).
pub trait Ops {
    type Value: Clone;

    /// Lifts a tensor into the backend with no derivative information.
    fn constant(&mut self, t: Tensor) -> Self::Value;
    /// Current value of a backend node.
    fn primal<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor;
    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    /// Elementwise product of equal-shape operands.
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    /// Adds a `1 × n` row to every row of an `m × n` matrix (bias add).
    fn add_row(&mut self, a: &Self::Value, row: &Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, a: &Self::Value, c: f64) -> Self::Value;
    fn add_scalar(&mut self, a: &Self::Value, c: f64) -> Self::Value;
    /// Concatenates rank-2 operands along columns.
    fn concat(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;
    fn silu(&mut self, a: &Self::Value) -> Self::Value;
    fn sin(&mut self, a: &Self::Value) -> Self::Value;
    fn cos(&mut self, a: &Self::Value) -> Self::Value;
    fn sum(&mut self, a: &Self::Value) -> Self::Value;
    fn mean(&mut self, a: &Self::Value) -> Self::Value;
    /// Squared Euclidean norm of each row, as an `m × 1` column.
    fn row_sq_norm(&mut self, a: &Self::Value) -> Result<Self::Value>;
    /// Sum of squares over all elements.
    fn sq_norm(&mut self, a: &Self::Value) -> Self::Value;
    /// Stop-gradient: same value, no derivative flows through.
    fn detach(&mut self, a: &Self::Value) -> Self::Value;
}

/// A computation description, generic over the evaluation backend.
pub trait Program {
    fn run<O: Ops>(&self, ops: &mut O, inputs: &[O::Value], params: &[O::Value]) -> Result<O::Value>;
}

/// Plain evaluation backend.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl Ops for Eval {
    type Value = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn primal<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::gemm(a, false, b, false)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.zip_map(b, "add", |x, y| x + y)
    }

    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.zip_map(b, "sub", |x, y| x - y)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.zip_map(b, "mul", |x, y| x * y)
    }

    fn add_row(&mut self, a: &Tensor, row: &Tensor) -> Result<Tensor> {
        tensor::add_row(a, row)
    }

    fn scale(&mut self, a: &Tensor, c: f64) -> Tensor {
        a.map(|x| c * x)
    }

    fn add_scalar(&mut self, a: &Tensor, c: f64) -> Tensor {
        a.map(|x| x + c)
    }

    fn concat(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = parts.iter().collect();
        tensor::concat_cols(&refs)
    }

    fn silu(&mut self, a: &Tensor) -> Tensor {
        a.map(tensor::silu)
    }

    fn sin(&mut self, a: &Tensor) -> Tensor {
        a.map(f64::sin)
    }

    fn cos(&mut self, a: &Tensor) -> Tensor {
        a.map(f64::cos)
    }

    fn sum(&mut self, a: &Tensor) -> Tensor {
        Tensor::scalar(a.sum())
    }

    fn mean(&mut self, a: &Tensor) -> Tensor {
        Tensor::scalar(a.sum() / a.len() as f64)
    }

    fn row_sq_norm(&mut self, a: &Tensor) -> Result<Tensor> {
        tensor::row_sq_norm(a)
    }

    fn sq_norm(&mut self, a: &Tensor) -> Tensor {
        Tensor::scalar(a.sq_norm())
    }

    fn detach(&mut self, a: &Tensor) -> Tensor {
        a.clone()
    }
}

/// Evaluates `program` on plain tensors. Non-finite output is a numeric fault.
pub fn forward<P: Program + ?Sized>(program: &P, inputs: &[Tensor], params: &[Tensor]) -> Result<Tensor> {
    let out = program.run(&mut Eval, inputs, params)?;
    out.check_finite("forward output")?;
    Ok(out)
}
