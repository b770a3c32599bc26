//! Minimal dense-tensor arithmetic with reverse-mode automatic differentiation.
//!
//! Everything is `f64`. There is no implicit broadcasting: the only
//! shape-mixing operations are the explicit [`Var::add_row`] and
//! [`Var::tile_rows`].
//!
//! ```
//! use paragan_autograd::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::row(vec![3.0]));
//! let loss = x.mul(&x).unwrap().sum().unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[6.0]);
//! ```

mod check;
mod error;
pub mod kernels;
mod tape;
mod tensor;

pub use check::{check_gradient, check_gradient_probes, max_error, Probe, ProbeResult};
pub use error::{Result, TensorError};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
