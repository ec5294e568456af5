//! Pre-attention token pruning for alternating-attention geometry transformers.
//!
//! The pipeline scores every patch token of every frame before the backbone,
//! keeps a fixed per-frame top fraction, merges part of the remainder into its
//! most similar kept token and drops the rest, runs a frozen alternating
//! attention backbone on the reduced sequence, and restores the dense token
//! grid with a per-frame cross-attention.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix it to `f64`, which is what training, gradient checks and
//! the harness use.

pub mod backbone;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod graph;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod restoration;
pub mod router;
pub mod saliency;
pub mod scalar;
pub mod scenes;
pub mod scorer;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = graph::Graph<f64>;
pub type ParamStore = params::ParamStore<f64>;
pub type TokenGrid = backbone::TokenGrid<f64>;
pub type Backbone = backbone::Backbone<f64>;
pub type AttentionTrace = backbone::AttentionTrace<f64>;
pub type SaliencyMap = saliency::SaliencyMap<f64>;
pub type Scorer = scorer::Scorer<f64>;
pub type Restorer = restoration::Restorer<f64>;
pub type RoutingPlan = router::RoutingPlan;
pub type Pipeline = pipeline::Pipeline<f64>;
