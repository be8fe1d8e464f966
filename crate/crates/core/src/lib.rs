pub mod autodiff;
pub mod cascade;
pub mod data;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod seed;
pub mod softbridge;
pub mod transformer;

pub use error::{Error, Result};
