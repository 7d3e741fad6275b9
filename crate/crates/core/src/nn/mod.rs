//! Minimal tensor engine: reverse-mode autodiff, layers, and Adam.

pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use layers::{BatchNorm2d, Conv2d, Linear, LstmCell};
pub use optim::Adam;
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, KlForm, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod gradcheck;
