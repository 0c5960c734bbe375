//! Desk-scale two-stage few-shot classification: contrastive pre-training
//! followed by cross-view episodic meta-training, built on a minimal
//! reverse-mode autodiff tensor engine.

pub mod data;
pub mod encoder;
pub mod gradcheck;
pub mod meta;
pub mod nn;
pub mod pretrain;
pub mod seed;
pub mod tensor;
pub mod train;

pub use tensor::{Tape, Tensor, TensorError, Var};
