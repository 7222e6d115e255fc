//! Extractive question answering over SQuAD-format data: a BiLSTM encoder,
//! bidirectional attention, a start decoder and a start-conditioned end
//! decoder, trained with a small reverse-mode autodiff engine.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod infer;
pub mod model;
pub mod span;
pub mod tensor;
pub mod train;

pub use error::{QaError, Result};
