//! Unsupervised object part segmentation by exchanging part appearance
//! between geometrically perturbed views of the same image.

pub mod bottleneck;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod tps;
pub mod viz;

pub use error::{Error, Result};

pub use candle_core;
pub use image;
pub use ndarray;
