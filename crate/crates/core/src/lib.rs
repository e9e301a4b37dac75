//! Dual-fusion SAR segmentation at desk scale.
//!
//! SAR images are translated into pseudo-optical images by a CycleGAN-style
//! generator, stitched with the SAR input on the channel axis, refined by an
//! external-attention stage and segmented by a compound-scaled encoder with
//! an ASPP/decoder head. Everything runs on the small reverse-mode engine in
//! [`autodiff`].

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gan;
pub mod harness;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod pgm;
pub mod segnet;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
