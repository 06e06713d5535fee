//! Semi-synthetic networked multi-treatment benchmarks and counterfactual
//! regression with representation balancing.
//!
//! The crate is organised bottom-up:
//!
//! - [`numkernel`]: dense/sparse matrix primitives and a reverse-mode tape
//!   sufficient to differentiate every objective in this crate.
//! - [`graphdata`]: the on-disk dataset format, loaders, and synthetic graph
//!   and covariate generators.
//! - [`topicsim`]: semi-synthetic treatment/outcome generation from an LDA
//!   topic model over the covariates and the one-hop network structure.
//! - [`balance`]: factual regression loss plus pairwise Wasserstein/MMD
//!   representation-balance losses over all treatment pairs.
//! - [`model`]: graph-convolutional and fully-connected shared
//!   representations with one outcome head per treatment.
//! - [`trainer`]: mini-batch training of the combined objective.
//! - [`evalmetrics`]: multi-treatment PEHE / ATE-error evaluation and
//!   multi-seed aggregation.
//! - [`cli`]: the `netcate` command-line entry points.

pub mod balance;
pub mod cli;
pub mod error;
pub mod evalmetrics;
pub mod graphdata;
pub mod model;
pub mod numkernel;
pub mod rng;
pub mod topicsim;
pub mod trainer;

pub use error::{Error, Result};
