//! The tiny autoregressive character model used as both generator and
//! student.
//!
//! The model is a fixed-window MLP: the last `window` symbols are embedded,
//! concatenated, passed through one tanh hidden layer, and projected to
//! next-symbol logits. Parameters are stored in f64 but kept on the f32
//! grid so the f32 checkpoint format round-trips exactly.

pub mod checkpoint;
mod model;
mod optim;
mod vocab;

pub use model::{softmax, GenerationConfig, Generation, ModelShape, ParamLayout, StudentModel};
pub use optim::{Optimizer, OptimizerKind};
pub use vocab::{Symbol, Vocabulary, BOS, EOS};
