//! Myocardium segmentation under contrast shift: volumes and MetaImage I/O,
//! a synthetic cardiac phantom generator, patch-based training of a 3D FCN
//! with soft Dice loss and contrast augmentation, full-volume inference,
//! DSC/ASSD evaluation, nonparametric statistics and the experiment harness.

pub mod config;
mod error;
pub mod experiment;
pub mod infer;
pub mod metrics;
pub mod phantom;
pub mod stats;
pub mod train;
pub mod volume;

pub use error::{CoreError, Result};
