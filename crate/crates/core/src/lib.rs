//! Per-language transformer encoders and decoders trained jointly so that
//! every encoder writes into one shared latent space that every decoder can
//! read.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod latent;
pub mod system;
pub mod tensor;
pub mod training;
pub mod transformer;
pub mod viz;

pub use error::{Error, Result};
