//! Texture synthesis with the Sliced Wasserstein loss over deep features.
//!
//! The crate is organised bottom-up:
//!
//! * [`sliced_ot`] holds the 1D optimal-transport kernels (projection,
//!   sorted matching, quantile resampling, spatial-tag augmentation).
//! * [`losses`] assembles per-layer statistics into the Sliced Wasserstein
//!   and Gram losses, with analytic gradients.
//! * [`vgg`] loads a VGG-19 weight bundle and runs the differentiable
//!   forward/backward pass through its first twelve conv layers.
//! * [`optim`] is a plain L-BFGS minimizer plus the restart driver that
//!   redraws projection directions between restarts.
//! * [`synth`] wires everything into texture synthesis, style transfer and
//!   tag-constrained synthesis.
//!
//! Pixel flattening is row-major everywhere: pixel `m = y * width + x`, and
//! feature matrices are `M x N` with channels contiguous.

pub mod error;
pub mod features;
pub mod losses;
pub mod optim;
pub mod real;
pub mod sliced_ot;
pub mod synth;
pub mod vgg;

pub use error::{Error, Result};
pub use features::{FeatureLayer, FeatureStack};
pub use losses::{DirectionPolicy, LossKind, LossRecord, LossReport};
pub use real::Real;
pub use sliced_ot::DirectionSet;
pub use synth::image::ImageTensor;
pub use synth::tagmap::TagMap;
pub use vgg::{Network, WeightBundle};
