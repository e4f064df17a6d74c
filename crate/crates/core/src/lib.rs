//! Parameter transfer units and the models, training harness and data
//! handling around them.

pub mod data;
pub mod error;
pub mod params;
pub mod ptu;
pub mod regularization;
pub mod seeds;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
pub use params::ParamSet;
