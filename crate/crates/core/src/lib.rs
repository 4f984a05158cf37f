//! CT preprocessing operators, a from-scratch U-Net with analytic
//! gradients, Dice training, and the pipeline comparison grid used to
//! study how preprocessing order affects liver segmentation.

pub mod bm3d;
pub mod error;
pub mod numerics;
pub mod preprocess;
pub mod report;
pub mod train;
pub mod unet;
pub mod volume_io;

pub use error::{Error, Result};
