//! Dense `f64` tensors with define-by-run reverse-mode differentiation.
//!
//! Only the operations the keypoint autoencoder graph needs are provided.
//! Each op validates shapes eagerly and returns an [`Error`](crate::Error)
//! on mismatch, so a malformed graph fails at construction instead of
//! during `backward`.
//!
//! ```
//! use kae::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![-1.0, 2.0]));
//! let r = tape.relu(x);
//! let loss = tape.sum(r);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0]);
//! ```

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_many, GradCheck, KINK_TOLERANCE};
pub(crate) use tape::sq_dist;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
