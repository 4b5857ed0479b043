//! Open-set semantic segmentation by class-conditional reconstruction.
//!
//! The pipeline has three stages:
//!
//! 1. **Closed-set training** ([`backbone`]) – a U-net learns the known classes;
//!    its encoder is then frozen.
//! 2. **Conditional reconstruction** ([`conditioning`], [`reconstruction`]) – two
//!    auxiliary encoders turn a per-pixel class map into FiLM parameters that
//!    modulate the frozen encoder features; a decoder reconstructs the input
//!    from them. Training pairs a matching mask with a mask from another image.
//! 3. **Open-set recognition** ([`openset`]) – every pixel is reconstructed
//!    under each known class; the minimum error is thresholded at a
//!    calibrated quantile and fused with the closed-set prediction.
//!
//! [`evaluation`] computes AUROC and accuracy, [`experiment`] runs the whole
//! leave-one-class-out suite with cached stages, and [`report`] renders maps
//! and summaries.

pub mod archive;
pub mod backbone;
pub mod conditioning;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod fsutil;
pub mod nn;
pub mod openset;
pub mod reconstruction;
pub mod report;

pub use error::{CoreSegError, Result};
