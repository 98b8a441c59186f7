//! Dense `f64` tensors, a recorded computation graph with reverse-mode
//! gradients, and an Adam optimizer.
//!
//! ```
//! use diffcore::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let w = g.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
//! let x = g.constant(Tensor::new(vec![3], vec![4.0, 5.0, 6.0]).unwrap()).unwrap();
//! let wx = g.mul(w, x).unwrap();
//! let loss = g.sum(wx).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(w).unwrap(), &[4.0, 5.0, 6.0]);
//! ```

mod adam;
mod error;
mod graph;
mod linalg;
mod tensor;

pub use adam::{Adam, ParamRef};
pub use error::{DiffError, Result};
pub use graph::{bce_scalar, sigmoid_scalar, softplus, Graph, Var};
pub use tensor::Tensor;
