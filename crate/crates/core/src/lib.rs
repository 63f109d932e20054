//! Two-agent referential signaling games over cell feature vectors.
//!
//! A sender network sees a target cell (alone, or together with one
//! distractor from every other class) and emits one symbol through a
//! Gumbel-softmax channel; a receiver network sees the symbol and the shuffled
//! candidates and must point at the target. Both are trained end to end and
//! the resulting vocabulary is analyzed for class structure.
//!
//! Modules, bottom up: [`autodiff`] (tape-based reverse mode), [`agents`],
//! [`data`], [`game`], [`training`], [`analysis`], and [`run`] which ties them
//! into reproducible runs for the command-line tool.

pub mod agents;
pub mod analysis;
pub mod autodiff;
pub mod config;
pub mod data;
mod error;
pub mod exec;
pub mod game;
pub mod run;
pub mod training;

pub use error::{Error, Result};
