//! Dense tensors with reverse-mode gradients and forward-mode
//! Jacobian-vector products over one shared operation set.

mod dual;
mod ops;
mod tape;
mod tensor;

pub use dual::{jvp, Dual, DualTensor, DualValue};
pub use ops::{forward, Eval, Ops, Program};
pub use tape::{value_and_grad, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;

    struct MatMulOnes;

    impl Program for MatMulOnes {
        fn run<O: Ops>(&self, ops: &mut O, inputs: &[O::Value], _params: &[O::Value]) -> crate::Result<O::Value> {
            ops.matmul(&inputs[0], &inputs[1])
        }
    }

    #[test]
    fn matmul_of_ones() {
        let a = Tensor::full(&[2, 3], 1.0);
        let b = Tensor::full(&[3, 1], 1.0);
        let out = forward(&MatMulOnes, &[a, b], &[]).unwrap();
        assert_eq!(out.shape(), &[2, 1]);
        assert_eq!(out.data(), &[3.0, 3.0]);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let a = Tensor::full(&[2, 3], 1.0);
        let b = Tensor::full(&[2, 1], 1.0);
        let err = forward(&MatMulOnes, &[a, b], &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[2, 1]"), "{msg}");
    }

    #[test]
    fn silu_at_zero() {
        let out = Eval.silu(&Tensor::scalar(0.0));
        assert_eq!(out.item().unwrap(), 0.0);
    }

    #[test]
    fn non_finite_output_is_numeric_fault() {
        let a = Tensor::full(&[1, 1], f64::MAX);
        let b = Tensor::full(&[1, 1], 10.0);
        let err = forward(&MatMulOnes, &[a, b], &[]).unwrap_err();
        assert!(matches!(err, crate::Error::NumericFault(_)));
    }

    #[test]
    fn tape_rejects_non_scalar_and_reuse() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::full(&[1, 2], 1.0));
        assert!(matches!(tape.grad(p, &[p]), Err(crate::Error::NotScalar(_))));
        let s = tape.sq_norm(&p);
        tape.grad(s, &[p]).unwrap();
        assert!(matches!(tape.grad(s, &[p]), Err(crate::Error::TapeConsumed)));
    }

    #[test]
    fn unused_parameter_gradient_is_exactly_zero() {
        let mut tape = Tape::new();
        let used = tape.param(Tensor::full(&[1, 2], 3.0));
        let unused = tape.param(Tensor::full(&[2, 2], 5.0));
        let loss = tape.sum(&used);
        let g = tape.grad(loss, &[used, unused]).unwrap();
        assert_eq!(g[0].data(), &[1.0, 1.0]);
        assert!(g[1].data().iter().all(|&x| x == 0.0));
    }
}
