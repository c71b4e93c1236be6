//! Step-by-step synthetic dataset construction for small models.
//!
//! A large language model first writes a seed dataset (rationale-guided for
//! single-text tasks, context-conditioned for pair and QA tasks). A small
//! model is trained on it, its mistakes on a gold validation split are fed
//! back to the LLM as "write something like this" prompts, and the new
//! examples are appended. The loop repeats for a few rounds.
//!
//! Besides the pipeline itself the crate carries the measurement side:
//! task metrics, a FLOPs accountant, diversity/coverage analyses and a
//! discrete-distribution simulator for the residual-mixing argument that
//! motivates the loop.

pub mod dataset;
pub mod demo;
pub mod diversity;
pub mod ees;
pub mod gapsim;
pub mod llm;
pub mod metrics;
pub mod par;
pub mod prompting;
pub mod rng;
pub mod synthesis;
pub mod task;
pub mod text;
pub mod trainer;

mod error;

pub use error::{Error, ErrorCategory};

pub use dataset::{Dataset, DatasetBuilder, Example, Payload, Provenance, Stage};
pub use task::{TaskKind, TaskSpec};
