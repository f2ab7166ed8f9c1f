pub mod adapter;
pub mod analysis;
pub mod attribution;
pub mod baselines;
pub mod data;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod semantics;
pub mod transfer;

pub use data::{Example, TokenBatch};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use model::{LayerTrace, LmConfig, LmParams};
