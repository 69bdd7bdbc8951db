use std::collections::BTreeMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::approx::{FeatureMap, Keying};
use crate::dice::KeyingKind;
use crate::error::{OpeError, Result};
use crate::policy::{sample_index, Policy};
use crate::seed::rng_for;
use crate::trajectory::{StateActionPair, Token, Trajectory, Turn};

/// What the environment does after an agent turn.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Outcome {
    Continue(Vec<Token>),
    /// Episode ends with this reward (stored as raw bits for exact keying).
    End(u64),
}

impl Outcome {
    pub fn end(reward: f64) -> Self {
        Outcome::End(reward.to_bits())
    }
}

fn d_rollouts() -> usize {
    2000
}
fn d_smoothing() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelfPlayConfig {
    #[serde(default)]
    pub keying: KeyingKind,
    #[serde(default = "d_rollouts")]
    pub rollouts: usize,
    #[serde(default = "d_smoothing")]
    pub smoothing: f64,
    #[serde(default)]
    pub vocab_size: Option<usize>,
}

impl Default for SelfPlayConfig {
    fn default() -> Self {
        SelfPlayConfig {
            keying: KeyingKind::Features,
            rollouts: d_rollouts(),
            smoothing: d_smoothing(),
            vocab_size: None,
        }
    }
}

/// Empirical environment: first-turn distribution plus smoothed outcome
/// counts per keyed state-action pair.
#[derive(Debug, Clone)]
pub struct EnvModel {
    keying: Keying,
    t_max: usize,
    smoothing: f64,
    first_turns: Vec<(Vec<Token>, f64)>,
    outcomes: Vec<Outcome>,
    counts: IndexMap<Vec<u8>, BTreeMap<usize, f64>>,
}

impl EnvModel {
    pub fn fit(experience: &[Trajectory], keying: Keying, t_max: usize, smoothing: f64) -> Result<Self> {
        if experience.is_empty() {
            return Err(OpeError::Empty("experience".into()));
        }
        let mut first: BTreeMap<Vec<Token>, f64> = BTreeMap::new();
        let mut outcome_index: BTreeMap<Outcome, usize> = BTreeMap::new();
        let mut raw: Vec<(Vec<u8>, Outcome)> = Vec::new();
        for h in experience {
            *first.entry(h.turns[0].tokens.clone()).or_default() += 1.0;
            for t in 1..=h.len() {
                let outcome = if t < h.len() {
                    Outcome::Continue(h.turns[2 * t].tokens.clone())
                } else {
                    Outcome::end(h.reward)
                };
                raw.push((keying.key(&h.pair(t))?, outcome.clone()));
                let next = outcome_index.len();
                outcome_index.entry(outcome).or_insert(next);
            }
        }
        // Re-index outcomes in sorted order so the model is order-independent.
        let outcomes: Vec<Outcome> = outcome_index.keys().cloned().collect();
        let position: BTreeMap<&Outcome, usize> = outcomes.iter().enumerate().map(|(i, o)| (o, i)).collect();
        let mut counts: IndexMap<Vec<u8>, BTreeMap<usize, f64>> = IndexMap::new();
        for (key, o) in &raw {
            *counts.entry(key.clone()).or_default().entry(position[o]).or_default() += 1.0;
        }
        let n = experience.len() as f64;
        Ok(EnvModel {
            keying,
            t_max,
            smoothing,
            first_turns: first.into_iter().map(|(k, c)| (k, c / n)).collect(),
            outcomes,
            counts,
        })
    }

    pub fn outcomes(&self) -> &[Outcome] {
        &self.outcomes
    }

    pub fn n_keys(&self) -> usize {
        self.counts.len()
    }

    /// Smoothed outcome probabilities at a pair, aligned with [`Self::outcomes`];
    /// `None` for pairs never observed.
    pub fn outcome_distribution(&self, pair: &StateActionPair) -> Result<Option<Vec<f64>>> {
        let key = self.keying.key(pair)?;
        Ok(self.counts.get(&key).map(|c| self.smoothed(c)))
    }

    fn smoothed(&self, c: &BTreeMap<usize, f64>) -> Vec<f64> {
        let total: f64 = c.values().sum();
        let denom = total + self.smoothing * self.outcomes.len() as f64;
        (0..self.outcomes.len())
            .map(|o| (c.get(&o).copied().unwrap_or(0.0) + self.smoothing) / denom)
            .collect()
    }

    /// One rollout of `policy` in the model: `(reward, truncated)`.
    pub fn rollout(&self, policy: &dyn Policy, rng: &mut dyn rand::RngCore) -> Result<(f64, bool)> {
        let probs: Vec<f64> = self.first_turns.iter().map(|(_, p)| *p).collect();
        let e0 = self.first_turns[sample_index(&probs, rng)].0.clone();
        let mut turns = vec![Turn::env(e0)];
        for t in 1..=self.t_max {
            let action = policy.sample(&turns, rng)?;
            let pair = StateActionPair::real(turns.clone(), action.clone(), t);
            let Some(dist) = self.outcome_distribution(&pair)? else {
                return Ok((0.0, true));
            };
            turns.push(Turn::agent(action));
            match &self.outcomes[sample_index(&dist, rng)] {
                Outcome::End(bits) => return Ok((f64::from_bits(*bits), false)),
                Outcome::Continue(tokens) => turns.push(Turn::env(tokens.clone())),
            }
        }
        Ok((0.0, true))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfPlayOutput {
    pub estimate: f64,
    pub rollouts: usize,
    /// Rollouts cut short at an unseen pair or at the horizon.
    pub truncated: usize,
}

/// Fits an empirical environment model and averages target rollouts in it.
pub fn model_based_selfplay_estimate(
    experience: &[Trajectory],
    target: &dyn Policy,
    t_max: usize,
    cfg: &SelfPlayConfig,
    seed: u64,
) -> Result<SelfPlayOutput> {
    if cfg.rollouts == 0 {
        return Err(OpeError::Config("rollouts must be positive".into()));
    }
    let vocab = cfg.vocab_size.unwrap_or_else(|| {
        experience
            .iter()
            .flat_map(|h| h.turns.iter().flat_map(|t| t.tokens.iter()))
            .copied()
            .max()
            .unwrap_or(0) as usize
            + 1
    });
    let keying = cfg.keying.build(FeatureMap::new(vocab, t_max));
    let model = EnvModel::fit(experience, keying, t_max, cfg.smoothing)?;
    let mut rng = rng_for(seed, "selfplay", 0);
    let mut total = 0.0;
    let mut truncated = 0;
    for _ in 0..cfg.rollouts {
        let (r, cut) = match model.rollout(target, &mut rng) {
            Ok(v) => v,
            // Target turns outside the feature vocabulary have no model entry,
            // and smoothed outcomes can reach prefixes the target rejects.
            Err(OpeError::DimensionMismatch { .. } | OpeError::PolicyUndefined(_)) => (0.0, true),
            Err(e) => return Err(e),
        };
        total += r;
        truncated += cut as usize;
    }
    if truncated > 0 {
        log::debug!("self-play: {truncated} of {} rollouts truncated", cfg.rollouts);
    }
    Ok(SelfPlayOutput {
        estimate: total / cfg.rollouts as f64,
        rollouts: cfg.rollouts,
        truncated,
    })
}
