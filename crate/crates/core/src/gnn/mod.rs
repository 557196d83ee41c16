//! Graph neural network for the per-cell quadratic subproblem.
//!
//! Each subproblem becomes a fully connected graph over its `Nt·Q` variable
//! nodes plus one constant node. Node features come from the diagonal of
//! `D_aug`, edge features from its off-diagonal entries, both divided by the
//! subproblem's scale. The network encodes nodes and edges, runs EdgeConv
//! message passing with concatenated max/mean pooling, decodes re/im pairs on
//! the variable nodes and scales the result onto the power ball.

mod checkpoint;
mod graph;
mod model;
mod solver;

pub use checkpoint::{
    load_model, model_to_bytes, read_model, save_model, write_model, CheckpointError, MODEL_MAGIC,
    MODEL_VERSION,
};
pub use graph::{build_graph, GraphBatch, ProblemGraph};
pub use model::{
    batch_loss, batch_of, interleaved_embedding, split_output, DenseBn, Forward, GnnModel, Linear,
    LossScaling, Mlp, Mode, ModelDims, DROPOUT_DECODER, DROPOUT_MLP, PROJECTION_EPS,
};
pub use solver::{gnnfp, GnnUpdate};
