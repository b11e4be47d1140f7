//! A small tensor and autodiff stack with the graph convolutions used for
//! learnable topological features.

mod gnn;
mod params;
mod tape;

pub use gnn::{edge_features, readout_edge, readout_graph, Conv, Gnn, GnnConfig, GnnOutput, GraphBatch, Mlp, Variant};
pub use params::{Adam, ParamId, ParameterStore};
pub use tape::{Tape, Tensor, Var};
