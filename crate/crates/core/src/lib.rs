//! Masked image modeling where a ViT student predicts, for masked inputs, the
//! per-token features of a frozen teacher, trained with a token-level cosine
//! alignment loss and evaluated by linear and dense probing.

pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod masking;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod student;
pub mod teacher;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
