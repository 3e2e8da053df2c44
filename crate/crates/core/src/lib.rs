pub mod cli;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod optim;
pub mod randgen;
pub mod rules;
pub mod session;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
