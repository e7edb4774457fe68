//! Dense tensors, tape-based reverse-mode differentiation and the special
//! functions used by the evidential loss.
//!
//! ```
//! use clear_tensor::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let w = tape.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap().with_grad());
//! let loss = w.mul(w).unwrap().sum_all().unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().unwrap(), &[2.0, 4.0]);
//! ```

mod error;
pub mod gradcheck;
mod layout;
mod params;
mod real;
mod rng;
pub mod special;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use params::{Bound, ParamId, ParamStore};
pub use real::{DType, Real};
pub use rng::{Rng, RngState};
pub use tape::{BinaryOp, CustomOp, ElementwiseOp, Gradients, ReduceOp, Tape, UnaryOp, Var};
pub use tensor::{broadcast_shape, numel, Tensor};
