pub mod adversary;
pub mod autograd;
pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod generator;
pub mod imaging;
pub mod nnblocks;
pub mod objective;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
