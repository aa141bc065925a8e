//! Dense f64 tensors and a reverse-mode tape sufficient for every layer in
//! the speaker models.

mod gradcheck;
mod kernels;
pub mod layers;
pub mod math;
mod params;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use params::{ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
