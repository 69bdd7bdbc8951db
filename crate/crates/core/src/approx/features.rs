use serde::{Deserialize, Serialize};

use crate::error::{OpeError, Result};
use crate::trajectory::{PairState, Speaker, StateActionPair, Token};

/// Bag-of-tokens featurization of a state-action pair.
///
/// Layout: environment-token bag of the prefix (divided by the number of
/// environment turns), agent-token bag of the prefix (divided by the number
/// of agent turns), token bag of the current action, one-hot turn index in
/// `0..=t_max`, and a constant bias feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureMap {
    pub vocab_size: usize,
    pub t_max: usize,
}

impl FeatureMap {
    pub fn new(vocab_size: usize, t_max: usize) -> Self {
        FeatureMap { vocab_size, t_max }
    }

    pub fn dim(&self) -> usize {
        3 * self.vocab_size + self.t_max + 2
    }

    pub fn bias_index(&self) -> usize {
        self.dim() - 1
    }

    fn slot(&self, tok: Token) -> Result<usize> {
        let t = tok as usize;
        if t >= self.vocab_size {
            return Err(OpeError::DimensionMismatch {
                expected: self.vocab_size,
                got: t + 1,
            });
        }
        Ok(t)
    }

    pub fn features(&self, pair: &StateActionPair) -> Result<Vec<f64>> {
        let prefix = match &pair.state {
            PairState::Prefix(p) => p,
            PairState::Pad(_) => {
                return Err(OpeError::Config("pad pairs are not featurized".into()))
            }
        };
        let action = pair
            .action_tokens()
            .ok_or_else(|| OpeError::Config("NextPad action on a real state".into()))?;
        if pair.turn_index > self.t_max {
            return Err(OpeError::DimensionMismatch {
                expected: self.t_max,
                got: pair.turn_index,
            });
        }
        let v = self.vocab_size;
        let mut x = vec![0.0; self.dim()];
        let mut env_turns = 0usize;
        let mut agent_turns = 0usize;
        for turn in prefix {
            let offset = match turn.speaker {
                Speaker::Environment => {
                    env_turns += 1;
                    0
                }
                Speaker::Agent => {
                    agent_turns += 1;
                    v
                }
            };
            for &tok in &turn.tokens {
                x[offset + self.slot(tok)?] += 1.0;
            }
        }
        let env_norm = env_turns.max(1) as f64;
        let agent_norm = agent_turns.max(1) as f64;
        x[..v].iter_mut().for_each(|f| *f /= env_norm);
        x[v..2 * v].iter_mut().for_each(|f| *f /= agent_norm);
        for &tok in action {
            x[2 * v + self.slot(tok)?] += 1.0;
        }
        x[3 * v + pair.turn_index] = 1.0;
        x[self.bias_index()] = 1.0;
        Ok(x)
    }
}

/// How a tabular function indexes state-action pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Keying {
    /// The full canonical serialization of the pair.
    History,
    /// The bag-of-tokens feature vector: histories with identical token
    /// counts, turn index and action share a slot.
    Features { map: FeatureMap },
    /// Turn index, last environment turn and action. Exact for token-encoded
    /// tabular MDPs, whose last environment turn is the Markov state.
    LastTurn,
}

impl Keying {
    pub fn key(&self, pair: &StateActionPair) -> Result<Vec<u8>> {
        match self {
            Keying::History => Ok(pair.canonical_bytes()),
            Keying::Features { map } => {
                let mut out = vec![0x10];
                for f in map.features(pair)? {
                    out.extend_from_slice(&f.to_bits().to_le_bytes());
                }
                Ok(out)
            }
            Keying::LastTurn => {
                let prefix = pair
                    .prefix()
                    .ok_or_else(|| OpeError::Config("pad pairs are not keyed".into()))?;
                let last = prefix
                    .iter()
                    .rev()
                    .find(|t| t.speaker == Speaker::Environment)
                    .ok_or_else(|| OpeError::InvalidTrajectory("prefix without environment turn".into()))?;
                let action = pair.action_tokens().unwrap_or(&[]);
                let mut out = vec![0x20];
                out.extend_from_slice(&(pair.turn_index as u32).to_le_bytes());
                out.extend_from_slice(&(last.tokens.len() as u32).to_le_bytes());
                last.tokens.iter().for_each(|t| out.extend_from_slice(&t.to_le_bytes()));
                out.extend_from_slice(&(action.len() as u32).to_le_bytes());
                action.iter().for_each(|t| out.extend_from_slice(&t.to_le_bytes()));
                Ok(out)
            }
        }
    }
}
