pub mod autodiff;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod rng;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod dino;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod vit;
