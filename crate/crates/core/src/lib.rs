//! Generative Next-K sequential recommendation.
//!
//! Stage one distills a teacher's Top-K lists into an autoregressive
//! decoder; stage two aligns that decoder with list-level rewards through
//! PPO. The [`evalkit`] module measures accuracy, diversity and popularity
//! bias, and provides the greedy re-ranking baselines.

pub mod dataset;
pub mod distill;
pub mod error;
pub mod evalkit;
pub mod nnet;
pub mod pipeline;
pub mod ppo;
pub mod reward;
pub mod seqcodec;
pub mod teacher;
pub mod training;

pub use error::{Error, Result};
