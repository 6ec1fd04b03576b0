//! Attention-guided multi-view age regression.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for common use.

pub mod attention;
pub mod backbone;
pub mod branches;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod grid;
pub mod kernels;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use attention::{AttentionMap, BBox, CoordSpace, Mask, Roi, RoiParams};
pub use backbone::{Backbone, BackboneConfig, Profile, RegressionHead, Variant};
pub use branches::{BranchMode, MultiViewMode, ViewModel};
pub use data::{Manifest, Split, View};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use grid::Grid;
pub use kernels::{BnHyper, Mode, RunningStats};
pub use params::ParamSet;
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use train::{EvalReport, NormStats, Stage, TrainConfig};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Backbone32 = Backbone<f32>;
pub type Backbone64 = Backbone<f64>;
pub type ViewModel32 = ViewModel<f32>;
pub type ViewModel64 = ViewModel<f64>;
