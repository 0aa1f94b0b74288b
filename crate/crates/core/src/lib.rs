//! Reinforcement learning with masked discrete diffusion policies.
//!
//! Policies generate fixed-length action sequences by iteratively unmasking
//! an all-MASK sequence. Policy improvement matches the diffusion model to the
//! KL-regularized mirror-descent target, either through a softmax-weighted
//! ELBO (forward KL) or a clipped importance-ratio surrogate (reverse KL).
//!
//! Module map:
//! - [`schedule`]: noise schedules and the forward masking process
//! - [`net`]: arrays, reverse-mode autodiff, denoiser and Q-network, Adam, checkpoints
//! - [`diffusion`]: reverse-process samplers, ELBO, exact likelihood
//! - [`pmd`]: mirror-descent target, FKL/RKL losses, temperature dual
//! - [`value`]: replay, TD targets, advantages, Polyak averaging
//! - [`envs`]: desk-scale bandit, gridworld and cooperative game
//! - [`oracle`]: brute-force references used to check everything else
//! - [`trainer`]: configuration, the policy-iteration loop, evaluation, planner mode

pub mod diffusion;
pub mod envs;
pub mod error;
pub mod net;
pub mod oracle;
pub mod pmd;
pub mod schedule;
pub mod trainer;
pub mod value;

pub use error::{Error, Result};

/// Deterministic RNG used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate RNG from a seed.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
