//! Joint spine segmentation and Cobb-angle regression with CAM-based
//! cross-task consistency.
//!
//! The crate pairs a pyramid-dilation segmentation network with a
//! three-angle regression network and couples them in both directions: the
//! regressor's class-activation maps regularize its own attention through a
//! shared-weight Siamese constraint, and feed back into the segmenter
//! through a learnable region-of-interest gate. A five-stage alternating
//! schedule trains the two networks to a mutually consistent optimum.
//! Data tooling (landmark rasterization, angle extraction, a synthetic
//! generator with analytic ground truth), seven evaluation metrics, and a
//! figure-emitting CLI round out the toolkit.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod consistency;
pub mod data;
pub mod domain;
pub mod error;
pub mod fig;
mod fsutil;
pub mod metrics;
pub mod nn;
pub mod regnet;
pub mod segnet;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
