//! Privacy-aware multi-device cooperative edge inference with distributed
//! resource bidding.
//!
//! The crate is organized bottom-up:
//!
//! - [`surrogate`]: stochastic stand-ins for the split classifiers and the
//!   model-inversion attacker, plus an exact SSIM utility.
//! - [`env`]: the multi-device environment (fading channels, sealed-bid
//!   admission, budgets, rewards).
//! - [`nn`]: a small dense network engine with exact gradients.
//! - [`maddpg`]: the decentralized actor / centralized critic learner.
//! - [`baselines`]: centralized DQN, the channel-agnostic SIB heuristic and
//!   the constrained MADDPG variants.
//! - [`harness`]: configuration, training/evaluation runs, sweeps and
//!   artifact persistence used by the CLI.

pub mod baselines;
pub mod env;
pub mod error;
pub mod harness;
pub mod maddpg;
pub mod nn;
pub mod surrogate;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The random stream type used throughout the simulator.
pub type SimRng = ChaCha8Rng;

/// Independent sub-streams derived from one experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Environment = 0,
    Policy = 1,
    Init = 2,
    Evaluation = 3,
    Calibration = 4,
}

/// Builds the random stream `stream` for `seed`.
pub fn stream_rng(seed: u64, stream: Stream) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
