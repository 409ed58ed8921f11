//! Dense `f64` tensors with a reverse-mode tape.

mod params;
mod tape;
mod tensor;

pub use params::{Adam, AdamConfig, Graph, ParamGrads, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var, GELU_CUBIC, GELU_SQRT_2_OVER_PI};
pub use tensor::Tensor;

