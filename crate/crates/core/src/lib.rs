//! Clustering-guided mixture of experts on CPU, with a synthetic
//! multi-source training harness.

pub mod attention;
pub mod cli;
pub mod clustering;
pub mod container;
pub mod datagen;
pub mod error;
pub mod experts;
pub mod harness;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod router;
pub mod tokens;

pub use error::{ComeError, Result};
