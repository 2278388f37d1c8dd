//! Continual pretraining of small language models on synthetic Markov corpora.
//!
//! The crate covers learning-rate schedules (cosine decay and infinite
//! schedules), synthetic corpora with controllable distribution shift,
//! compute-equivalent replay and reservoir mixing, a small MLP language model
//! with hand-written gradients, AdamW, a resumable trainer, and an experiment
//! harness that reproduces the warmup, re-warming, replay and infinite-schedule
//! studies at desk scale.

// Range checks are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod harness;
pub mod mixer;
pub mod model;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod trainer;

pub use error::{CtpError, Result};
