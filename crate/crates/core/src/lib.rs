//! Prompt tuning with generated soft prompts on a small frozen seq2seq transformer.
//!
//! A prompt generator maps a task embedding to an `n×d` soft prompt that is
//! prepended to the encoder input of a frozen language model. Gradients flow
//! through a small reverse-mode tape into the generator and embeddings only.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod experiments;
pub mod generators;
pub mod gradcheck;
pub mod lm;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod trainer;
pub mod verify;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::Tensor;
