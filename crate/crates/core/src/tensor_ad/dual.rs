use super::ops::{Ops, Program};
use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

/// A primal value paired with a tangent of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct DualTensor {
    primal: Tensor,
    tangent: Tensor,
}

impl DualTensor {
    pub fn new(primal: Tensor, tangent: Tensor) -> Result<Self> {
        if primal.shape() != tangent.shape() {
            return Err(Error::shape("dual", primal.shape(), tangent.shape()));
        }
        Ok(DualTensor { primal, tangent })
    }

    pub fn constant(primal: Tensor) -> Self {
        let tangent = Tensor::zeros(primal.shape());
        DualTensor { primal, tangent }
    }

    pub fn primal(&self) -> &Tensor {
        &self.primal
    }

    pub fn tangent(&self) -> &Tensor {
        &self.tangent
    }

    pub fn into_parts(self) -> (Tensor, Tensor) {
        (self.primal, self.tangent)
    }
}

/// Backend value: a tangent of `None` is structurally zero, which lets the
/// backend skip work for parameters and constants.
#[derive(Clone, Debug)]
pub struct DualValue {
    primal: Tensor,
    tangent: Option<Tensor>,
}

/// Forward-mode (dual number) backend.
#[derive(Debug, Default, Clone, Copy)]
pub struct Dual;

fn lin(a: Option<Tensor>, b: Option<Tensor>, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Option<Tensor>> {
    Ok(match (a, b) {
        (None, None) => None,
        (Some(x), None) => Some(x),
        (None, Some(y)) => Some(y.map(|v| f(0.0, v))),
        (Some(x), Some(y)) => Some(x.zip_map(&y, op, f)?),
    })
}

impl Ops for Dual {
    type Value = DualValue;

    fn constant(&mut self, t: Tensor) -> DualValue {
        DualValue {
            primal: t,
            tangent: None,
        }
    }

    fn primal<'a>(&'a self, v: &'a DualValue) -> &'a Tensor {
        &v.primal
    }

    fn matmul(&mut self, a: &DualValue, b: &DualValue) -> Result<DualValue> {
        let primal = tensor::gemm(&a.primal, false, &b.primal, false)?;
        let left = match &a.tangent {
            Some(ta) => Some(tensor::gemm(ta, false, &b.primal, false)?),
            None => None,
        };
        let right = match &b.tangent {
            Some(tb) => Some(tensor::gemm(&a.primal, false, tb, false)?),
            None => None,
        };
        Ok(DualValue {
            primal,
            tangent: lin(left, right, "matmul", |x, y| x + y)?,
        })
    }

    fn add(&mut self, a: &DualValue, b: &DualValue) -> Result<DualValue> {
        let primal = a.primal.zip_map(&b.primal, "add", |x, y| x + y)?;
        Ok(DualValue {
            primal,
            tangent: lin(a.tangent.clone(), b.tangent.clone(), "add", |x, y| x + y)?,
        })
    }

    fn sub(&mut self, a: &DualValue, b: &DualValue) -> Result<DualValue> {
        let primal = a.primal.zip_map(&b.primal, "sub", |x, y| x - y)?;
        Ok(DualValue {
            primal,
            tangent: lin(a.tangent.clone(), b.tangent.clone(), "sub", |x, y| x - y)?,
        })
    }

    fn mul(&mut self, a: &DualValue, b: &DualValue) -> Result<DualValue> {
        let primal = a.primal.zip_map(&b.primal, "mul", |x, y| x * y)?;
        let left = match &a.tangent {
            Some(ta) => Some(ta.zip_map(&b.primal, "mul", |x, y| x * y)?),
            None => None,
        };
        let right = match &b.tangent {
            Some(tb) => Some(a.primal.zip_map(tb, "mul", |x, y| x * y)?),
            None => None,
        };
        Ok(DualValue {
            primal,
            tangent: lin(left, right, "mul", |x, y| x + y)?,
        })
    }

    fn add_row(&mut self, a: &DualValue, row: &DualValue) -> Result<DualValue> {
        let primal = tensor::add_row(&a.primal, &row.primal)?;
        let tangent = match (&a.tangent, &row.tangent) {
            (None, None) => None,
            (Some(ta), None) => Some(ta.clone()),
            (ta, Some(tr)) => {
                let base = ta.clone().unwrap_or_else(|| Tensor::zeros(a.primal.shape()));
                Some(tensor::add_row(&base, tr)?)
            }
        };
        Ok(DualValue { primal, tangent })
    }

    fn scale(&mut self, a: &DualValue, c: f64) -> DualValue {
        DualValue {
            primal: a.primal.map(|x| c * x),
            tangent: a.tangent.as_ref().map(|t| t.map(|x| c * x)),
        }
    }

    fn add_scalar(&mut self, a: &DualValue, c: f64) -> DualValue {
        DualValue {
            primal: a.primal.map(|x| x + c),
            tangent: a.tangent.clone(),
        }
    }

    fn concat(&mut self, parts: &[DualValue]) -> Result<DualValue> {
        let primals: Vec<&Tensor> = parts.iter().map(|p| &p.primal).collect();
        let primal = tensor::concat_cols(&primals)?;
        let tangent = if parts.iter().all(|p| p.tangent.is_none()) {
            None
        } else {
            let zeros: Vec<Option<Tensor>> = parts
                .iter()
                .map(|p| match p.tangent {
                    Some(_) => None,
                    None => Some(Tensor::zeros(p.primal.shape())),
                })
                .collect();
            let refs: Vec<&Tensor> = parts
                .iter()
                .zip(&zeros)
                .map(|(p, z)| p.tangent.as_ref().or(z.as_ref()).expect("tangent or zero fill"))
                .collect();
            Some(tensor::concat_cols(&refs)?)
        };
        Ok(DualValue { primal, tangent })
    }

    fn silu(&mut self, a: &DualValue) -> DualValue {
        let tangent = a.tangent.as_ref().map(|t| {
            a.primal
                .zip_map(t, "silu", |x, dx| tensor::silu_grad(x) * dx)
                .expect("tangent shape matches primal")
        });
        DualValue {
            primal: a.primal.map(tensor::silu),
            tangent,
        }
    }

    fn sin(&mut self, a: &DualValue) -> DualValue {
        let tangent = a.tangent.as_ref().map(|t| {
            a.primal
                .zip_map(t, "sin", |x, dx| x.cos() * dx)
                .expect("tangent shape matches primal")
        });
        DualValue {
            primal: a.primal.map(f64::sin),
            tangent,
        }
    }

    fn cos(&mut self, a: &DualValue) -> DualValue {
        let tangent = a.tangent.as_ref().map(|t| {
            a.primal
                .zip_map(t, "cos", |x, dx| -x.sin() * dx)
                .expect("tangent shape matches primal")
        });
        DualValue {
            primal: a.primal.map(f64::cos),
            tangent,
        }
    }

    fn sum(&mut self, a: &DualValue) -> DualValue {
        DualValue {
            primal: Tensor::scalar(a.primal.sum()),
            tangent: a.tangent.as_ref().map(|t| Tensor::scalar(t.sum())),
        }
    }

    fn mean(&mut self, a: &DualValue) -> DualValue {
        let n = a.primal.len() as f64;
        DualValue {
            primal: Tensor::scalar(a.primal.sum() / n),
            tangent: a.tangent.as_ref().map(|t| Tensor::scalar(t.sum() / n)),
        }
    }

    fn row_sq_norm(&mut self, a: &DualValue) -> Result<DualValue> {
        let primal = tensor::row_sq_norm(&a.primal)?;
        let tangent = match &a.tangent {
            Some(t) => {
                let prod = a.primal.zip_map(t, "row_sq_norm", |x, dx| 2.0 * x * dx)?;
                let rows = prod.rows();
                let data = (0..rows).map(|i| prod.row(i).iter().sum()).collect();
                Some(Tensor::new(vec![rows, 1], data)?)
            }
            None => None,
        };
        Ok(DualValue { primal, tangent })
    }

    fn sq_norm(&mut self, a: &DualValue) -> DualValue {
        let tangent = a.tangent.as_ref().map(|t| {
            Tensor::scalar(
                a.primal
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(x, dx)| 2.0 * x * dx)
                    .sum(),
            )
        });
        DualValue {
            primal: Tensor::scalar(a.primal.sq_norm()),
            tangent,
        }
    }

    fn detach(&mut self, a: &DualValue) -> DualValue {
        DualValue {
            primal: a.primal.clone(),
            tangent: None,
        }
    }
}

/// Jacobian-vector product: evaluates `program` on dual inputs with the
/// parameters held constant. The primal equals [`super::forward`] bitwise.
pub fn jvp<P: Program + ?Sized>(program: &P, inputs: &[DualTensor], params: &[Tensor]) -> Result<DualTensor> {
    let inputs: Vec<DualValue> = inputs
        .iter()
        .map(|d| DualValue {
            primal: d.primal.clone(),
            tangent: Some(d.tangent.clone()),
        })
        .collect();
    let params: Vec<DualValue> = params
        .iter()
        .map(|p| DualValue {
            primal: p.clone(),
            tangent: None,
        })
        .collect();
    let out = program.run(&mut Dual, &inputs, &params)?;
    out.primal.check_finite("jvp primal")?;
    let tangent = out.tangent.unwrap_or_else(|| Tensor::zeros(out.primal.shape()));
    tangent.check_finite("jvp tangent")?;
    Ok(DualTensor {
        primal: out.primal,
        tangent,
    })
}
