pub mod cli;
pub mod curation;
pub mod dsp;
pub mod error;
pub mod evalr;
pub mod layers;
pub mod numerics;
pub mod separator;
pub mod sparse_attention;
pub mod synthdata;
pub mod trainer;
pub mod transformer;
pub mod unet;

pub use error::{Error, Result};
