//! Hierarchical reinforcement learning with preference-guided subgoals.
//!
//! A high-level policy proposes subgoals, rewarded by a reward model fit to
//! pairwise preferences and kept within reach of the low level by a learned
//! distance constraint whose radius follows a success-rate curriculum. The
//! low level runs two policies on one replay buffer: an exploration policy
//! that adds a random-network-distillation bonus and a base policy trained on
//! the sparse goal reward only.

pub mod annotate;
pub mod approx;
pub mod distance;
pub mod env;
pub mod error;
pub mod high;
pub mod low;
pub mod prefs;
pub mod replay;
pub mod rnd;
pub mod trainer;

pub use error::{Error, Result};
