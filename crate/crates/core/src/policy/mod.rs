//! Gaussian policy network and a from-scratch PPO trainer.
//!
//! The network maps the two-channel plane observation plus the normalized
//! grid position to a squashed action mean, a state-independent log-std and
//! a value estimate. Backpropagation is written out by hand and verified with
//! finite differences in [`grad_check`].

mod adam;
mod agent;
pub mod checkpoint;
mod gradcheck;
mod network;
mod ppo;
mod train;

pub use adam::{clip_grad_norm, Adam, AdamConfig};
pub use agent::{policy_episode, random_episode, Decision, EpisodeError, PolicyAgent};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError};
pub use gradcheck::{grad_check, grad_check_piecewise, GradCheckReport};
pub use network::{
    gaussian_entropy, gaussian_log_prob, sample_action, ForwardCache, Layout, NetShape, OutputGrad, PolicyOutput,
    PolicyParams, SparseInput, ACTION_DIM, LOG_STD_MAX, LOG_STD_MIN,
};
pub use ppo::{
    clipped_surrogate, discounted_returns, gae, loss_regime, minibatch_loss, normalize, ppo_update, Batch, LossCoefs,
    LossStats, Transition, UpdateStats,
};
pub use train::{
    eval_seeds, evaluate, select_best, train, write_curve_csv, CurvePoint, TrainConfig, TrainError, TrainOutcome,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("importance ratio {ratio:.3e} exceeded {limit:.0e}; update aborted")]
    RatioExplosion { ratio: f64, limit: f64 },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}
