//! Dense f64 tensors, a reverse-mode autodiff tape, named parameter storage,
//! and a finite-difference gradient oracle. Everything above this module is
//! built from these pieces.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_gradcheck, LossFn};
pub use params::ParamStore;
pub use tape::{Tape, Val};
pub use tensor::Tensor;
