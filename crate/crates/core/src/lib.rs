//! Shrinkage estimation and linear mixed models for balanced and unbalanced
//! designs, with a home/away football prediction pipeline built on top.

pub mod designs;
pub mod dists;
pub mod error;
pub mod football;
pub mod lmm;
pub mod rng;
pub mod shrinkage;

pub use error::{Error, Result};
