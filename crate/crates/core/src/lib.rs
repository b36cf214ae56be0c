//! Cross-modality masked pretraining for survival prediction.
//!
//! A slice/depth-factorized 3D transformer encodes CT volumes, a graph
//! transformer encodes clinical variables, and cross-modality completion
//! stacks let each masked modality reconstruct itself from the other.
//! After pretraining the trunk is frozen and a small MLP head is fit with
//! the Cox partial likelihood.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod cmc;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod schema;
pub mod stats;
pub mod survival;
pub mod synth;
pub mod tabular;
pub mod tensor;
pub mod train;
pub mod visual;
pub mod volume;

pub use error::{Error, Result};
