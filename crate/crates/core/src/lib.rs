// SPDX-License-Identifier: MIT OR Apache-2.0

//! Building blocks for probing the FFN of a single-layer patch transformer
//! forecaster with sparse autoencoders.

pub mod artifact;
pub mod data;
pub mod error;
pub mod forecaster;
pub mod nn;
pub mod probes;
pub mod report;
pub mod sae;
pub mod trainer;

pub use error::{Error, Result};
