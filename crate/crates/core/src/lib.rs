//! Meta-reinforcement learning for cold-start conversational recommendation.
//!
//! The crate simulates attribute-asking / item-recommending conversations,
//! meta-trains a recurrent conversational policy across a population of
//! users, and adapts that policy (together with a state-aware item
//! recommender) to unseen users from a handful of conversations.
//!
//! Module map:
//! - [`numerics`]: tensors, reverse-mode autodiff, optimizers.
//! - [`catalog`]: dataset ingestion, user splits, embedding pretraining and
//!   simulation data synthesis.
//! - [`dialogue`]: conversation state machine and action-space construction.
//! - [`simulator`]: the simulated user and reward bookkeeping.
//! - [`encoder`]: the signed-embedding Transformer state encoder with cross gates.
//! - [`recommender`]: state-aware item scoring and its adaptation loss.
//! - [`policy`]: recurrent policies, REINFORCE and exploration objectives.
//! - [`metalearn`]: meta-training, local adaptation, meta-testing, baselines.
//! - [`harness`]: configuration, metrics, traces, CLI and chat REPL.

pub mod catalog;
pub mod dialogue;
pub mod encoder;
mod error;
pub mod harness;
pub mod metalearn;
pub mod numerics;
pub mod policy;
pub mod recommender;
pub mod rng;
pub mod simulator;

pub use error::{Error, Result};
