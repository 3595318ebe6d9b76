pub mod adapters;
pub mod autodiff;
pub mod backbone;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod objectives;
pub mod rng;

pub use error::{Error, Result};
