//! Gene expression prediction from tissue patch features with a dual-branch
//! contrastive model.
//!
//! A spot-level query branch aligns pathology and gene embeddings through
//! cross-attention and InfoNCE while a translator head regresses expression
//! from the pathology embedding. An auxiliary neighbor branch builds
//! similarity hypergraphs over each spot's spatial neighborhood, convolves
//! them, and aligns the pooled embeddings the same way. Inference uses only
//! the pathology encoder and the translator.
//!
//! Learnable components are generic over [`Scalar`] (`f32` or `f64`); the
//! `*64` aliases below are the concrete types used by the pipeline and CLI.

pub mod attention;
pub mod cli;
pub mod contrastive;
pub mod data;
pub mod encoders;
mod error;
pub mod hypergraph;
pub mod metrics;
pub mod numerics;
mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = numerics::Matrix<f64>;
pub type Matrix32 = numerics::Matrix<f32>;
pub type ParamTree64 = numerics::ParamTree<f64>;
pub type ModelParams64 = training::ModelParams<f64>;
pub type ModelParams32 = training::ModelParams<f32>;
pub type EncoderParams64 = encoders::EncoderParams<f64>;
pub type HyperGraph64 = hypergraph::HyperGraph<f64>;
