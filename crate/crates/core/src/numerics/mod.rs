//! Dense matrices, activations and reverse-mode gradients.

pub mod gradcheck;
pub mod matrix;
pub mod param;
pub mod tape;

pub use gradcheck::{gradient_check, GradCheckReport};
pub use matrix::{cosine, leaky_relu, sigmoid, DenseMatrix, LEAKY_SLOPE, LN_EPS};
pub use param::{ParamStore, Parameter, Session, TensorRecord};
pub use tape::{Gradients, Tape, Var};
