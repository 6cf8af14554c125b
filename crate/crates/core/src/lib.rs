//! Face template inversion toolkit.
//!
//! Reconstructs face images from fixed-length deep templates with
//! neighborly de-convolutional networks, augments their training data with a
//! revised DCGAN, and scores attacks under verification and closed-set
//! identification protocols. A NORTA sampler shows how correlated vectors with
//! arbitrary marginals are generated from uniform inputs.

pub mod attack_eval;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod extractor;
pub mod gan;
pub mod losses;
pub mod nbnet;
pub mod nn;
pub mod norta;
pub mod par;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
