//! Dense `f64` arrays with tape-based reverse-mode differentiation.
//!
//! Record a forward computation on a [`Tape`] through [`Var`] methods,
//! then call [`Tape::backward`] on a scalar output. Every primitive
//! checks its output for non-finite values and fails with the node
//! index and operation name.
//!
//! ```
//! use cfvsr::diffcore::{Array, Tape};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Array::from_vec(vec![1.0, 2.0]));
//! let y = x.mul(x).unwrap().sum().unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).data(), &[2.0, 4.0]);
//! ```

mod array;
mod gradcheck;
pub mod kernels;
mod tape;

pub use array::Array;
pub use gradcheck::{central_difference, finite_difference_check, relative_error, GradCheck};
pub use tape::{Gradients, Tape, Var, L2_EPS, MASK_FILL};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value produced by {op} at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("backward needs a scalar output, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{0}")]
    InvalidArgument(String),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_constant_row_is_uniform() {
        let tape = Tape::new();
        let x = tape.constant(Array::full(&[2, 4], 3.5));
        let y = x.softmax().unwrap().value();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn logsumexp_of_zeros() {
        let tape = Tape::new();
        let x = tape.constant(Array::from_vec(vec![0.0, 0.0]));
        let y = x.logsumexp_last().unwrap();
        assert!((y.item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::new();
        let a = Array::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 4.0, -1.0], vec![2.0, 2.0, 2.0]]).unwrap();
        let i = tape.constant(Array::identity(3));
        let av = tape.constant(a.clone());
        assert_eq!(i.matmul(av).unwrap().value(), a);
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::new();
        let x = tape.leaf(Array::from_vec(vec![1.0, 2.0, 3.0]));
        let s = x.sum().unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).data(), &[1.0, 1.0, 1.0]);

        let tape = Tape::new();
        let x = tape.leaf(Array::from_vec(vec![1.0, 2.0]));
        let unused = tape.leaf(Array::from_vec(vec![5.0]));
        let y = x.mul(x).unwrap().sum().unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).data(), &[2.0, 4.0]);
        assert_eq!(g.get(unused).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Array::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(DiffError::NotScalar { .. })));
    }

    #[test]
    fn nan_fails_fast_with_node() {
        let tape = Tape::new();
        let x = tape.leaf(Array::from_vec(vec![-1.0]));
        match x.log() {
            Err(DiffError::NonFinite { op, node }) => {
                assert_eq!(op, "log");
                assert_eq!(node, 1);
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let tape = Tape::new();
        let a = tape.leaf(Array::zeros(&[2, 3]));
        let b = tape.leaf(Array::zeros(&[3, 2]));
        assert!(matches!(a.add(b), Err(DiffError::ShapeMismatch { op: "add", .. })));
        assert!(a.matmul(a).is_err());
    }

    #[test]
    fn zero_row_normalization_is_guarded() {
        let tape = Tape::new();
        let x = tape.leaf(Array::zeros(&[1, 3]));
        let y = x.l2_normalize().unwrap();
        assert_eq!(y.value().data(), &[0.0, 0.0, 0.0]);
        let g = tape.backward(y.sum().unwrap()).unwrap().get(x);
        assert!(g.all_finite());
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let tape = Tape::new();
            let x = tape.leaf(Array::new(&[2, 3], vec![0.3, -1.2, 2.0, 0.7, 0.1, -0.4]).unwrap());
            let w = tape.leaf(Array::new(&[3, 2], vec![1.0, 0.5, -0.3, 0.2, 0.9, -1.1]).unwrap());
            let y = x.matmul(w).unwrap().log_softmax().unwrap().sum().unwrap();
            let g = tape.backward(y).unwrap();
            (y.item(), g.get(w).into_data())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sum_checker_is_exact() {
        let x = Array::new(&[2, 2], vec![0.1, -3.0, 2.2, 7.0]).unwrap();
        let report = finite_difference_check(|_, v| v.sum(), &x, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn checker_rejects_non_finite_probes() {
        let x = Array::from_vec(vec![1e-7]);
        let res = finite_difference_check(|_, v| v.log()?.sum(), &x, 1e-5);
        assert!(res.is_err());
    }
}
