//! Actor-critic online data mixing for multi-domain model pretraining, at desk scale.
//!
//! A DDPG agent learns per-domain sampling weights from a gradient-alignment
//! reward while a tiny language model trains on a synthetic multi-domain
//! corpus. The learned policy can be trained against a small proxy model and
//! then transferred to drive the data mixture of a larger target model.
//! Static-weight and EXP3 bandit mixers are included as baselines.
//!
//! Module map:
//! - [`tensor`]: dense f64 tensors, a reverse-mode autodiff tape, Adam.
//! - [`corpus`]: synthetic Markov-chain domains with tunable overlap, and
//!   batch sampling under the mixture distribution.
//! - [`lm_env`]: the tiny LM training environment (state, reward inputs,
//!   model update).
//! - [`reward`]: gradient-alignment scores and their smoothed form.
//! - [`agent`]: the DDPG actor/critic, replay buffer, and update rules.
//! - [`baselines`]: static and EXP3 mixing policies.
//! - [`orchestrator`]: end-to-end runs, proxy-to-target transfer, metrics,
//!   and run comparison reports.

pub mod agent;
pub mod baselines;
pub mod corpus;
pub mod lm_env;
pub mod orchestrator;
pub mod reward;
pub mod tensor;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("run diverged: {0}")]
    Divergence(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for config errors, 3 for divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Divergence(_) => 3,
            _ => 1,
        }
    }
}
