pub mod adam;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod ttt;

pub use config::{Backbone, InnerKind, Mode, ModelConfig, TargetMode};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::Model;
pub use tensor::Tensor;
