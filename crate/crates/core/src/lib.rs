//! Hierarchical transformer policies for multi-agent Stackelberg matrix games.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors, reverse-mode autodiff, layers and Adam.
//! * [`env`]: declarative finite-horizon Markov games with per-agent rewards.
//! * [`equilibria`]: exhaustive pure Nash / strong Stackelberg solver.
//! * [`model`]: the inner/outer transformer policy with actor and critic heads.
//! * [`trainer`]: rollouts, per-agent GAE and the clipped PPO update.
//! * [`harness`]: seeded sweeps, ablation grids, result documents and curves.

pub mod env;
pub mod equilibria;
pub mod error;
pub mod games;
pub mod harness;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
