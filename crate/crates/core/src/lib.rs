pub mod autoencoder;
pub mod diagnostics;
pub mod embedding;
pub mod error;
pub mod neighbors;
pub mod optim;
pub mod quantizer;
pub mod transform;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
