pub mod backbone;
pub mod codec;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod params;
pub mod run;
pub mod tensor;
pub mod ttd;

pub use error::{Error, Result};
