//! Minimal reverse-mode differentiation over dense real tensors.
//!
//! A [`Tape`] records every primitive in execution order together with what
//! its backward rule needs. [`Tape::backward`] sweeps the record in reverse
//! and returns leaf gradients. The engine is generic over [`Float`]: `f64` is
//! used to verify gradients against [`finite_difference_check`], `f32` for
//! training.
//!
//! ```
//! use consep::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::new(&[3], vec![-1.0, 2.0, 3.0]).unwrap());
//! let y = tape.relu(x).unwrap();
//! let loss = tape.sum(y).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 1.0]);
//! ```

mod check;
mod kernels;
mod ops;
mod scalar;
mod tape;
mod tensor;

pub use check::{finite_difference_check, DEFAULT_STEP, RELATIVE_FLOOR};
pub use kernels::{segment_layout, LAYER_NORM_EPS};
pub use scalar::Float;
pub use tape::{Gradients, Padding, Tape, Var};
pub use tensor::Tensor;
