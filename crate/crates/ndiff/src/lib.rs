//! Dense 64-bit array engine with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records each primitive as it is evaluated. Leaves are
//! created with [`Graph::param`] (trainable) or [`Graph::constant`];
//! [`Graph::backward`] on a scalar output returns the leaf gradients.
//!
//! ```
//! use ndiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
//! let sq = g.hadamard(x, x).unwrap();
//! let y = g.sum(sq);
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```
//!
//! Every primitive's vector-Jacobian product is checked against central
//! differences by [`finite_diff_check`].

mod conv;
mod error;
mod gemm;
mod gradcheck;
mod graph;
mod norm;
mod ops;
mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{finite_diff_check, CheckOptions, GradCheckReport, LeafReport};
pub use graph::{Gradients, Graph, Indices, OpKind, Var};
pub use norm::{BatchNormMode, BatchNormState, DEFAULT_EPS, DEFAULT_MOMENTUM};
pub use ops::{sigmoid, BCE_CLAMP};
pub use tensor::Tensor;
