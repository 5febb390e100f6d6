//! Collaborative skin-lesion segmentation and melanoma recognition.
//!
//! The network couples a segmentation head with a lesion classifier:
//! morphological center/periphery regions of the predicted mask drive the
//! classifier's pooling ([`lpse`]), and the diagnosis in turn gates the
//! segmentation features channel by channel ([`dgff`]). Stages are cascaded
//! ([`model`]) and trained with plain SGD on a small tape-based autodiff
//! engine ([`autodiff`]).

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod dgff;
pub mod error;
mod kernels;
pub mod lpse;
pub mod metrics;
pub mod model;
pub mod morphology;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use kernels::Precision;
