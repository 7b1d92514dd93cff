//! Scalable dynamic routing for self-supervised pre-training.
//!
//! An unlabeled dataset is clustered into `k = g^L` subsets, a weight-sharing
//! network with `g^L` sub-nets is pre-trained so that each sub-net sees its own
//! subset, and a downstream task is routed to the sub-net whose features give
//! the best kNN accuracy.

pub mod clustering;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod pipeline;
pub mod routing;
pub mod sdrnet;
pub mod train;

pub use error::{Error, Result};
