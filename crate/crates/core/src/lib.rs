pub mod bench;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
mod init;
pub mod lsa;
pub mod metrics;
pub mod model;
pub mod params;
pub mod plot;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{MlsaError, Result};
pub use params::ParameterStore;
pub use tensor::{Graph, Scalar, Tensor, Var};
