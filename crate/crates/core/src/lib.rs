//! Model-free, behavior-agnostic off-policy evaluation for varying-horizon
//! episodic dialogs with a single terminal reward.
//!
//! Episodes are padded with pseudo states to a fixed horizon and chained into
//! an infinite-horizon process, whose stationary distribution correction is
//! estimated with a regularized minimax objective. The policy value is read
//! off with a post-normalized ratio estimate.

pub mod approx;
pub mod baselines;
pub mod dice;
pub mod envs;
pub mod error;
pub mod oracle;
pub mod policy;
pub mod seed;
pub mod tabular;
pub mod trajectory;

pub use error::{OpeError, Result};
