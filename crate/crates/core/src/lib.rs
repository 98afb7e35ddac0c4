//! Option-adversarial inverse reinforcement learning (oIRL) at desk scale.
//!
//! The crate learns per-option reward functions and a policy over options from
//! expert demonstrations on small enumerable gridworlds, and ships exact
//! tabular oracles for the option transition kernel, the recursive option
//! returns and the reward-recovery and contraction properties of the method.
//!
//! Module map:
//!
//! - [`mdp`], [`grid`], [`env`]: tabular MDPs, gridworld builders and the
//!   environment wrapper used for rollouts.
//! - [`options`]: options runtime and the analytic option recursions.
//! - [`nn`]: feed-forward nets with reverse-mode gradients and Adam.
//! - [`rollout`]: trajectory collection, experts, demonstrations, densities.
//! - [`discriminator`]: per-option AIRL discriminators and the recursive loss.
//! - [`ppoc`]: PPO over options (intra-option, termination, master updates).
//! - [`trainer`]: the alternating adversarial training loop.
//! - [`verify`]: exact numeric checks of recoverability and contraction.

pub mod checkpoint;
pub mod config;
pub mod discriminator;
pub mod env;
pub mod error;
pub mod grid;
pub mod mdp;
pub mod metrics;
pub mod nn;
pub mod options;
pub mod ppoc;
pub mod rng;
pub mod rollout;
pub mod stats;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
