pub mod align;
pub mod bench;
pub mod cfm;
pub mod data;
pub mod error;
pub mod exec;
pub mod net;
pub mod numerics;
pub mod rng;
pub mod sampler;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
