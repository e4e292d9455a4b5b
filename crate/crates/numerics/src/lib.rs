//! Dense `f64` tensors, a reverse-mode gradient tape, and a central
//! finite-difference gradient checker.
//!
//! Layout is row-major and there is no broadcasting beyond what individual
//! ops document (layer-norm gains apply per feature). A [`Tape`] is confined
//! to one thread; [`Tensor`] values are plain data and can be shared freely.

pub mod error;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use error::{NumericsError, Result};
pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, DEFAULT_EPS};
pub use tape::{set_corrupt_gelu_backward, Diagnostics, Gradients, Tape, Var};
pub use tensor::{cosine, cosine_sim, dot, norm, Tensor};
