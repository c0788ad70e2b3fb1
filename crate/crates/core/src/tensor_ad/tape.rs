use super::ops::{Ops, Program};
use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Node {
    Const,
    Param,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Concat(Vec<usize>),
    Silu(usize),
    Sin(usize),
    Cos(usize),
    Sum(usize),
    Mean(usize),
    RowSqNorm(usize),
    SqNorm(usize),
    Detach,
}

/// Reverse-mode recording of a computation.
///
/// Nodes are appended in evaluation order, so the backward pass is a single
/// reverse sweep. Only nodes that depend on a registered parameter carry a
/// gradient.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<Tensor>,
    needs_grad: Vec<bool>,
    params: Vec<usize>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, node: Node, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(node);
        self.values.push(value);
        self.needs_grad.push(needs_grad);
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: usize) -> bool {
        self.needs_grad[v]
    }

    /// Registers a trainable parameter slot.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(Node::Param, value, true);
        self.params.push(v.0);
        v
    }

    /// Records an input that receives no gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Node::Const, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Runs `program` on the tape, registering `params` as parameter slots.
    pub fn record<P: Program + ?Sized>(&mut self, program: &P, inputs: &[Tensor], params: &[Tensor]) -> Result<(Var, Vec<Var>)> {
        let inputs: Vec<Var> = inputs.iter().map(|t| self.input(t.clone())).collect();
        let params: Vec<Var> = params.iter().map(|t| self.param(t.clone())).collect();
        let out = program.run(self, &inputs, &params)?;
        Ok((out, params))
    }

    /// Gradients of the scalar `loss` with respect to each of `params`.
    ///
    /// Consumes the tape: a second call fails with [`Error::TapeConsumed`].
    pub fn grad(&mut self, loss: Var, params: &[Var]) -> Result<Vec<Tensor>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lv = &self.values[loss.0];
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        self.consumed = true;
        let grads = self.backward(loss.0)?;
        Ok(params
            .iter()
            .map(|p| {
                grads[p.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.values[p.0].shape()))
            })
            .collect())
    }

    fn backward(&self, loss: usize) -> Result<Vec<Option<Tensor>>> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::full(self.values[loss].shape(), 1.0));
        for i in (0..=loss).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i] {
                Node::Const | Node::Param | Node::Detach => {
                    grads[i] = Some(g);
                    continue;
                }
                Node::MatMul(a, b) => {
                    if self.ng(*a) {
                        let ga = tensor::gemm(&g, false, &self.values[*b], true)?;
                        accumulate(&mut grads, *a, ga)?;
                    }
                    if self.ng(*b) {
                        let gb = tensor::gemm(&self.values[*a], true, &g, false)?;
                        accumulate(&mut grads, *b, gb)?;
                    }
                }
                Node::Add(a, b) => {
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.clone())?;
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                }
                Node::Sub(a, b) => {
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.map(|x| -x))?;
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                }
                Node::Mul(a, b) => {
                    if self.ng(*a) {
                        let ga = g.zip_map(&self.values[*b], "mul", |x, y| x * y)?;
                        accumulate(&mut grads, *a, ga)?;
                    }
                    if self.ng(*b) {
                        let gb = g.zip_map(&self.values[*a], "mul", |x, y| x * y)?;
                        accumulate(&mut grads, *b, gb)?;
                    }
                }
                Node::AddRow(a, row) => {
                    if self.ng(*row) {
                        accumulate(&mut grads, *row, tensor::col_sums(&g))?;
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                }
                Node::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, g.map(|x| c * x))?;
                }
                Node::AddScalar(a) => accumulate(&mut grads, *a, g.clone())?,
                Node::Concat(parts) => {
                    let widths: Vec<usize> = parts.iter().map(|p| self.values[*p].cols()).collect();
                    for (p, gp) in parts.iter().zip(tensor::split_cols(&g, &widths)) {
                        if self.ng(*p) {
                            accumulate(&mut grads, *p, gp)?;
                        }
                    }
                }
                Node::Silu(a) => {
                    let ga = self.values[*a].zip_map(&g, "silu", |x, gy| tensor::silu_grad(x) * gy)?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Node::Sin(a) => {
                    let ga = self.values[*a].zip_map(&g, "sin", |x, gy| x.cos() * gy)?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Node::Cos(a) => {
                    let ga = self.values[*a].zip_map(&g, "cos", |x, gy| -x.sin() * gy)?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Node::Sum(a) => {
                    let gs = g.data()[0];
                    accumulate(&mut grads, *a, Tensor::full(self.values[*a].shape(), gs))?;
                }
                Node::Mean(a) => {
                    let n = self.values[*a].len() as f64;
                    let gs = g.data()[0] / n;
                    accumulate(&mut grads, *a, Tensor::full(self.values[*a].shape(), gs))?;
                }
                Node::RowSqNorm(a) => {
                    let x = &self.values[*a];
                    let mut ga = x.clone();
                    for r in 0..x.rows() {
                        let gr = g.data()[r];
                        for v in ga.row_mut(r) {
                            *v *= 2.0 * gr;
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Node::SqNorm(a) => {
                    let gs = g.data()[0];
                    accumulate(&mut grads, *a, self.values[*a].map(|x| 2.0 * gs * x))?;
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) -> Result<()> {
    grads[idx] = Some(match grads[idx].take() {
        None => g,
        Some(prev) => prev.zip_map(&g, "grad accumulate", |a, b| a + b)?,
    });
    Ok(())
}

impl Ops for Tape {
    type Value = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        self.input(t)
    }

    fn primal<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        &self.values[v.0]
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = tensor::gemm(&self.values[a.0], false, &self.values[b.0], false)?;
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(Node::MatMul(a.0, b.0), v, ng))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.values[a.0].zip_map(&self.values[b.0], "add", |x, y| x + y)?;
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(Node::Add(a.0, b.0), v, ng))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.values[a.0].zip_map(&self.values[b.0], "sub", |x, y| x - y)?;
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(Node::Sub(a.0, b.0), v, ng))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.values[a.0].zip_map(&self.values[b.0], "mul", |x, y| x * y)?;
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(Node::Mul(a.0, b.0), v, ng))
    }

    fn add_row(&mut self, a: &Var, row: &Var) -> Result<Var> {
        let v = tensor::add_row(&self.values[a.0], &self.values[row.0])?;
        let ng = self.ng(a.0) || self.ng(row.0);
        Ok(self.push(Node::AddRow(a.0, row.0), v, ng))
    }

    fn scale(&mut self, a: &Var, c: f64) -> Var {
        let v = self.values[a.0].map(|x| c * x);
        let ng = self.ng(a.0);
        self.push(Node::Scale(a.0, c), v, ng)
    }

    fn add_scalar(&mut self, a: &Var, c: f64) -> Var {
        let v = self.values[a.0].map(|x| x + c);
        let ng = self.ng(a.0);
        self.push(Node::AddScalar(a.0), v, ng)
    }

    fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| &self.values[p.0]).collect();
        let v = tensor::concat_cols(&refs)?;
        let ng = parts.iter().any(|p| self.ng(p.0));
        Ok(self.push(Node::Concat(parts.iter().map(|p| p.0).collect()), v, ng))
    }

    fn silu(&mut self, a: &Var) -> Var {
        let v = self.values[a.0].map(tensor::silu);
        let ng = self.ng(a.0);
        self.push(Node::Silu(a.0), v, ng)
    }

    fn sin(&mut self, a: &Var) -> Var {
        let v = self.values[a.0].map(f64::sin);
        let ng = self.ng(a.0);
        self.push(Node::Sin(a.0), v, ng)
    }

    fn cos(&mut self, a: &Var) -> Var {
        let v = self.values[a.0].map(f64::cos);
        let ng = self.ng(a.0);
        self.push(Node::Cos(a.0), v, ng)
    }

    fn sum(&mut self, a: &Var) -> Var {
        let v = Tensor::scalar(self.values[a.0].sum());
        let ng = self.ng(a.0);
        self.push(Node::Sum(a.0), v, ng)
    }

    fn mean(&mut self, a: &Var) -> Var {
        let x = &self.values[a.0];
        let v = Tensor::scalar(x.sum() / x.len() as f64);
        let ng = self.ng(a.0);
        self.push(Node::Mean(a.0), v, ng)
    }

    fn row_sq_norm(&mut self, a: &Var) -> Result<Var> {
        let v = tensor::row_sq_norm(&self.values[a.0])?;
        let ng = self.ng(a.0);
        Ok(self.push(Node::RowSqNorm(a.0), v, ng))
    }

    fn sq_norm(&mut self, a: &Var) -> Var {
        let v = Tensor::scalar(self.values[a.0].sq_norm());
        let ng = self.ng(a.0);
        self.push(Node::SqNorm(a.0), v, ng)
    }

    fn detach(&mut self, a: &Var) -> Var {
        let v = self.values[a.0].clone();
        self.push(Node::Detach, v, false)
    }
}

/// Records `program` on a fresh tape and returns the scalar output value
/// together with its gradients for every parameter.
pub fn value_and_grad<P: Program + ?Sized>(program: &P, inputs: &[Tensor], params: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let (out, vars) = tape.record(program, inputs, params)?;
    let value = tape.value(out).item()?;
    let grads = tape.grad(out, &vars)?;
    Ok((value, grads))
}
