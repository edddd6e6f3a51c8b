//! DC-GAN image synthesis and CNN tumor classification built on a small
//! reverse-mode autodiff engine over `f64` tensors.

pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod data;
pub mod dcgan;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tape::{Activation, Mode, Tape, Var};
pub use tensor::Tensor;
