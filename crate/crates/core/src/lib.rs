//! Latent-space policy optimization for deformable image registration.

pub mod autodiff;
pub mod error;
pub mod fields;
pub mod gradcheck;
pub mod grpo;
pub mod io;
pub mod network;
pub mod objectives;
pub mod optim;
pub mod oracles;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
