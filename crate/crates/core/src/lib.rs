//! Numerical core for dilated-attention heatmap pose estimation.
//!
//! The crate carries its own reverse-mode autodiff ([`graph`]) over dense
//! `f64` tensors, the network building blocks, a flow-based learnable
//! heatmap generator, losses, PCK metrics, synthetic data and the training
//! loop.

pub mod ablate;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod data;
pub mod dlm;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod init;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod sfm;
pub mod tensor;
pub mod train;

pub use config::RunConfig;
pub use data::{KeypointAnnotation, Sample};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use metrics::{Metric, PckResult};
pub use model::Model;
pub use tensor::{Module, Param, Tensor};
