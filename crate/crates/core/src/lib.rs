//! Contrastive joint image/segmentation embeddings and the uncertainty
//! estimation built on top of them.
//!
//! The pipeline is: synthetic [`data`] → [`model`] trained by [`training`] →
//! a [`uncertainty::LatentBank`] of ground-truth latents → per-pixel
//! uncertainty maps scored by [`metrics`].

pub mod data;
pub mod error;
pub mod io;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod morphology;
pub mod numerics;
pub mod training;
pub mod uncertainty;

pub use error::{CrispError, Result};
