//! Channel attention that folds per-channel signals into a small 2-D map,
//! scans the map with banks of grouping filters, and re-weights channels with
//! the encoded result — plus the residual-network joint variant, a spatial
//! coordination stage, toy backbones, a training harness, dataset and
//! checkpoint IO, and a verification suite over independent oracles.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gfilter;
pub mod ini;
pub mod kernels;
pub mod nn;
pub mod params;
pub mod residual;
pub mod spatial;
pub mod tape;
pub mod train;
pub mod verify;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
