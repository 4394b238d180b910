//! Differentiable building blocks: a reverse-mode tape, parameter storage,
//! recurrent and attention layers, and gradient verification.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod seq;

#[cfg(test)]
mod tests;

pub use gradcheck::{grad_check, grad_check_params, random_projection, GradCheckReport};
pub use graph::{Gradients, Graph, Reduction, Var};
pub use layers::{
    AttentionMemory, BahdanauAttention, BiGru, Conv1d, Direction, Embedding, GruCell, GruLayer, Linear,
    VectorialAttention,
};
pub use params::{Init, Param, ParamId, ParamStore};
pub use seq::{row_mask, SeqVar, SequenceBatch};
