//! Probabilistic segmentation with a hierarchy of latent variables.
//!
//! The crate trains and evaluates a conditional variational autoencoder
//! that predicts a distribution over label maps for an image. Latents live
//! at successively coarser resolutions; the likelihood decodes them from
//! the coarsest level down, adding a residual per level. A deterministic
//! U-Net baseline shares the whole pipeline.
//!
//! Modules, roughly in pipeline order: [`data`] synthesizes multi-annotator
//! datasets, [`model`] builds the networks, [`loss`] holds the objective,
//! [`train`] fits and selects checkpoints, [`inference`] draws samples and
//! the γ-map, [`metrics`] scores them, and [`cli`] drives it all from a
//! JSON config. The guide in `book/` walks through each piece.

// `!(x > 0)` is used on purpose: it rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
mod fsio;
pub mod graph;
pub mod inference;
pub mod kernels;
pub mod labels;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod params;
pub mod plot;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/model.md")]
    pub struct Model;
    #[doc = include_str!("../../../book/src/objective.md")]
    pub struct Objective;
    #[doc = include_str!("../../../book/src/sampling.md")]
    pub struct Sampling;
    #[doc = include_str!("../../../book/src/metrics.md")]
    pub struct Metrics;
    #[doc = include_str!("../../../book/src/data.md")]
    pub struct Data;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
