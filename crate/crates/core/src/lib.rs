pub mod cli;
pub mod error;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod reparam;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
