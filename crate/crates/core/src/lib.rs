pub mod audio;
pub mod captioning;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod corpus;
pub mod diagnostics;
pub mod encoders;
pub mod error;
pub mod numerics;
pub mod pretrain;
pub mod text;
pub mod zeroshot;

pub use error::{Error, Result};
pub use numerics::{ParameterStore, Tape, Tensor, Var};
