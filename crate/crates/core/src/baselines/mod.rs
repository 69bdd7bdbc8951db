//! Comparison estimators: least-squares TD on padded episodes, model-based
//! self-play, and the plain behavior mean.

mod lstdq;
mod selfplay;

pub use lstdq::{lstdq_estimate, LstdqConfig, LstdqFeatures, LstdqOutput, NextAction};
pub use selfplay::{model_based_selfplay_estimate, EnvModel, Outcome, SelfPlayConfig, SelfPlayOutput};

use crate::error::{OpeError, Result};
use crate::trajectory::Trajectory;

/// Mean logged reward, ignoring the target policy.
pub fn behavior_mean_baseline(experience: &[Trajectory]) -> Result<f64> {
    if experience.is_empty() {
        return Err(OpeError::Empty("experience".into()));
    }
    Ok(experience.iter().map(|h| h.reward).sum::<f64>() / experience.len() as f64)
}
