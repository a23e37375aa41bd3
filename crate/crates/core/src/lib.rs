pub mod check;
pub mod config;
pub mod error;
pub mod io;
pub mod metrics;
pub mod net;
pub mod ot;
pub mod paths;
pub mod sampler;
pub mod so3;
pub mod train;
pub mod zmatrix;

pub use error::{Error, Result};
