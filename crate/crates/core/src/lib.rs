pub mod attnnet;
pub mod bench;
pub mod cyclo;
pub mod detector;
pub mod error;
pub mod par;
pub mod reinforce;
pub mod rng;
pub mod sigsynth;

pub use error::{Error, Result};
