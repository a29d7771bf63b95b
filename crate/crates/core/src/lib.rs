pub mod baselines;
pub mod error;
pub mod sae;
pub mod store;

pub use error::{Error, Result};
pub mod metrics;
pub mod model;
pub mod train;
