//! Acquisition functions as rewards for training a synthetic-data generator.
//!
//! A tiny character model generates tagged (question, reasoning, answer)
//! triplets and is trained with group-relative policy optimization against
//! one acquisition reward measured on a student copy of the same model.
//! The crate also covers the surrounding pipeline: pseudo-labeling,
//! dataset generation, the Random and Filtered selection baselines, and
//! student training and evaluation.

pub mod cluster;
pub mod config;
pub mod embed;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod prompt;
pub mod grpo;
pub mod pipeline;
pub mod rewards;
pub mod rng;
pub mod sample;
pub mod selection;
pub mod student;
pub mod task;

pub use error::{Error, Result};
