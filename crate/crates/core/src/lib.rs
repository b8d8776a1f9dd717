//! Robust reinforcement learning through adversarial attacks on the
//! dynamics of the environment.
//!
//! The agent's own critic (or actor) is differentiated with respect to its
//! observation to craft a small perturbation; an environment modifier then
//! moves the simulator into a valid state that produces the perturbed
//! observation. Training the agent on those disturbed dynamics makes it
//! more robust to harder versions of the environment.
//!
//! Modules:
//! - [`nn`]: dense tanh networks with input Jacobians and parameter gradients.
//! - [`env`]: highway and flappy toy simulators with observation/modifier maps.
//! - [`ppo`]: actor-critic PPO trainer.
//! - [`attack`]: critic-gradient and actor-saliency perturbations.
//! - [`adversary`]: RARL / FSP / CO-FSP adversary-agent baselines.
//! - [`runner`]: experiment plans, statistics and the CLI backend.

pub mod adversary;
pub mod attack;
pub mod env;
pub mod nn;
pub mod ppo;
pub mod runner;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
