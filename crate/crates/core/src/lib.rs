pub mod analysis;
pub mod attention;
pub mod bench;
pub mod cli;
pub mod data;
pub mod error;
pub mod imageio;
pub mod layout;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
