//! Pattern-composed decoder queries for a compact DETR-style detector,
//! with the training, evaluation and synthetic-data tooling around it.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

pub mod analysis;
pub mod autodiff;
pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod image;
pub mod loss;
pub mod matching;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod train;

pub use autodiff::{Graph, Tensor, TensorError, Var};
pub use boxes::BBox;
pub use config::RunConfig;
pub use image::Image;
pub use model::{Detector, ModelConfig, QueryMode};
pub use scalar::Scalar;

pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Detector32 = Detector<f32>;
pub type Detector64 = Detector<f64>;
pub type Trainer32 = train::Trainer<f32>;
pub type Trainer64 = train::Trainer<f64>;
