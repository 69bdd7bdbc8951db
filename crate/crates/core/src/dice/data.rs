use rand::RngCore;

use super::DiceConfig;
use crate::error::{OpeError, Result};
use crate::policy::Policy;
use crate::seed::rng_for;
use crate::trajectory::{pad_trajectory, PaddedTrajectory, Token, Trajectory};

/// A target-policy action at one real prefix: a single draw, or the full
/// distribution when the expectation is taken exactly.
pub type ActionDistribution = Vec<(Vec<Token>, f64)>;

/// Padded dialogs with one target action per real turn.
#[derive(Debug, Clone, PartialEq)]
pub struct OpeDataset {
    pub t_max: usize,
    pub dialogs: Vec<PaddedTrajectory>,
    /// `target_actions[i][t - 1]` is the draw at turn `t` of dialog `i`.
    pub target_actions: Vec<Vec<Vec<Token>>>,
    /// Exact next-action distributions; used instead of the draws when present.
    pub target_distributions: Option<Vec<Vec<ActionDistribution>>>,
    /// Per-dialog weights (all 1 for logged experience).
    pub weights: Vec<f64>,
}

fn prefix_of(d: &PaddedTrajectory, t: usize) -> Result<&[crate::trajectory::Turn]> {
    d.pair(t)
        .prefix()
        .ok_or_else(|| OpeError::InvalidTrajectory(format!("slot {t} is a pad")))
}

/// Draws `ã_t` for every real prefix of `dialog`.
pub fn sample_target_actions(
    dialog: &PaddedTrajectory,
    target: &dyn Policy,
    rng: &mut dyn RngCore,
) -> Result<Vec<Vec<Token>>> {
    (1..=dialog.original_length)
        .map(|t| {
            let prefix = prefix_of(dialog, t)?;
            target
                .sample(prefix, rng)
                .map_err(|e| OpeError::PolicyUndefined(format!("turn {t}: {e}")))
        })
        .collect()
}

fn pad_all(experience: &[Trajectory], t_max: usize) -> Result<Vec<PaddedTrajectory>> {
    if experience.is_empty() {
        return Err(OpeError::Empty("experience".into()));
    }
    experience.iter().map(|h| pad_trajectory(h, t_max)).collect()
}

/// Pads the experience and draws one target action per real turn, once.
pub fn generate_ope_data(experience: &[Trajectory], target: &dyn Policy, cfg: &DiceConfig) -> Result<OpeDataset> {
    let dialogs = pad_all(experience, cfg.t_max)?;
    let mut rng = rng_for(cfg.seed, "target_actions", 0);
    let target_actions = dialogs
        .iter()
        .map(|d| sample_target_actions(d, target, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let n = dialogs.len();
    Ok(OpeDataset {
        t_max: cfg.t_max,
        dialogs,
        target_actions,
        target_distributions: None,
        weights: vec![1.0; n],
    })
}

/// Like [`generate_ope_data`] but records the target's full action
/// distribution at each prefix; the draws are the most likely actions.
pub fn generate_expected_ope_data(experience: &[Trajectory], target: &dyn Policy, t_max: usize) -> Result<OpeDataset> {
    let dialogs = pad_all(experience, t_max)?;
    let mut dists = Vec::with_capacity(dialogs.len());
    for d in &dialogs {
        let mut per_turn = Vec::with_capacity(d.original_length);
        for t in 1..=d.original_length {
            let dist = target
                .distribution(prefix_of(d, t)?)
                .ok_or_else(|| OpeError::PolicyUndefined("policy has no enumerable distribution".into()))?
                .map_err(|e| OpeError::PolicyUndefined(format!("turn {t}: {e}")))?;
            per_turn.push(dist);
        }
        dists.push(per_turn);
    }
    let target_actions = dists
        .iter()
        .map(|per_turn| {
            per_turn
                .iter()
                .map(|dist: &ActionDistribution| {
                    dist.iter()
                        .fold(None::<&(Vec<Token>, f64)>, |best, c| match best {
                            Some(b) if b.1 >= c.1 => Some(b),
                            _ => Some(c),
                        })
                        .map(|c| c.0.clone())
                        .unwrap_or_default()
                })
                .collect()
        })
        .collect();
    let n = dialogs.len();
    Ok(OpeDataset {
        t_max,
        dialogs,
        target_actions,
        target_distributions: Some(dists),
        weights: vec![1.0; n],
    })
}

impl OpeDataset {
    pub fn len(&self) -> usize {
        self.dialogs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogs.is_empty()
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.dialogs.len() {
            return Err(OpeError::LengthMismatch(format!(
                "{} weights for {} dialogs",
                weights.len(),
                self.dialogs.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(OpeError::Config("weights must be finite and non-negative".into()));
        }
        self.weights = weights;
        Ok(self)
    }

    /// Next-action candidates with probabilities at turn `t` of dialog `i`.
    pub fn next_actions(&self, i: usize, t: usize) -> Vec<(&[Token], f64)> {
        match &self.target_distributions {
            Some(d) => d[i][t - 1].iter().map(|(a, p)| (a.as_slice(), *p)).collect(),
            None => vec![(self.target_actions[i][t - 1].as_slice(), 1.0)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_actions.len() != self.dialogs.len() || self.weights.len() != self.dialogs.len() {
            return Err(OpeError::LengthMismatch("dataset columns differ in length".into()));
        }
        for (i, (d, a)) in self.dialogs.iter().zip(&self.target_actions).enumerate() {
            if d.t_max() != self.t_max {
                return Err(OpeError::LengthMismatch(format!("dialog {i} padded to {}", d.t_max())));
            }
            if a.len() != d.original_length {
                return Err(OpeError::LengthMismatch(format!(
                    "dialog {i}: {} target actions for {} turns",
                    a.len(),
                    d.original_length
                )));
            }
        }
        if let Some(dists) = &self.target_distributions {
            if dists.len() != self.dialogs.len()
                || dists.iter().zip(&self.dialogs).any(|(x, d)| x.len() != d.original_length)
            {
                return Err(OpeError::LengthMismatch("target distributions misaligned".into()));
            }
        }
        Ok(())
    }

    /// Largest token id in dialogs and target actions, plus one.
    pub fn vocab_size(&self) -> usize {
        let mut max = 0u32;
        for d in &self.dialogs {
            for p in &d.pairs {
                if let Some(prefix) = p.prefix() {
                    for turn in prefix {
                        max = max.max(turn.tokens.iter().copied().max().unwrap_or(0));
                    }
                }
                if let Some(a) = p.action_tokens() {
                    max = max.max(a.iter().copied().max().unwrap_or(0));
                }
            }
        }
        for a in self.target_actions.iter().flatten() {
            max = max.max(a.iter().copied().max().unwrap_or(0));
        }
        if let Some(d) = &self.target_distributions {
            for (a, _) in d.iter().flatten().flatten() {
                max = max.max(a.iter().copied().max().unwrap_or(0));
            }
        }
        max as usize + 1
    }
}
