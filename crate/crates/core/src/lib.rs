//! Non-neural core of uncertainty-aware LiDAR panoptic segmentation.
//!
//! Evidential (Dirichlet) prediction math and losses, a polar bird's-eye-view
//! grid, panoptic fusion of semantic and center/offset predictions,
//! uncertainty-driven refinement, an uncertainty-aware evaluation suite,
//! file formats and synthetic data.
//!
//! Numeric code is generic over [`Real`] (`f32`/`f64`); the aliases below fix
//! the common `f64` instantiations.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evidential;
pub mod fusion;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod model;
pub mod num;
pub mod refine;
pub mod special;
pub mod synth;

pub use error::{Error, Result};
pub use model::{ClassId, ClassTaxonomy, PanopticLabelSet};
pub use num::Real;

pub type PointCloud = model::PointCloud<f64>;
pub type DirichletField = model::DirichletField<f64>;
pub type GridConfig = grid::GridConfig<f64>;
pub type Logits = evidential::Logits<f64>;
pub type Prediction = evidential::Prediction<f64>;
pub type KPConvLayer = refine::KPConvLayer<f64>;
pub type FusedOutput = fusion::FusedOutput<f64>;
