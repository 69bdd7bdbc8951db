//! Differentiable scalar functions of state-action pairs.
//!
//! Three families share one interface: tabular (one parameter per keyed
//! pair), linear over bag-of-tokens features, and a small GeLU network over
//! the same features. An output activation of `Square` keeps the value
//! non-negative. [`SharedTrunk`] pairs two network heads over a common trunk.

mod dense;
mod features;
pub mod gradcheck;
mod pretrain;
mod shared;

use std::collections::BTreeMap;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dense::{gelu, gelu_grad, Stack, Tape};
pub use features::{FeatureMap, Keying};
pub use pretrain::{pretrain_trunk, PretrainConfig};
pub use shared::{SharedGrad, SharedTrunk};

use crate::error::{OpeError, Result};
use crate::trajectory::{PaddedTrajectory, Token};
use crate::trajectory::StateActionPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Square,
}

impl Activation {
    #[inline]
    pub fn apply(self, y: f64) -> f64 {
        match self {
            Activation::Identity => y,
            Activation::Square => y * y,
        }
    }

    #[inline]
    pub fn derivative(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Square => 2.0 * y,
        }
    }

    /// Pre-activation producing `value` (the non-negative root for `Square`).
    pub fn inverse(self, value: f64) -> f64 {
        match self {
            Activation::Identity => value,
            Activation::Square => value.max(0.0).sqrt(),
        }
    }
}

/// An approximator input, resolved once and reused across steps.
#[derive(Debug, Clone, PartialEq)]
pub enum Input {
    /// Tabular slot; `None` for a pair never registered.
    Slot(Option<usize>),
    Dense(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct TabularIndex {
    pub keying: Keying,
    slots: IndexMap<Vec<u8>, usize>,
    init_param: f64,
}

#[derive(Debug, Clone)]
pub enum ApproxKind {
    Tabular(TabularIndex),
    Linear(FeatureMap),
    Mlp { features: FeatureMap, stack: Stack },
}

#[derive(Debug, Clone)]
pub struct Approximator {
    kind: ApproxKind,
    activation: Activation,
    params: Vec<f64>,
    seed: u64,
}

impl Approximator {
    /// Empty table; unseen pairs evaluate to `init_value`.
    pub fn tabular(keying: Keying, activation: Activation, init_value: f64) -> Self {
        Approximator {
            kind: ApproxKind::Tabular(TabularIndex {
                keying,
                slots: IndexMap::new(),
                init_param: activation.inverse(init_value),
            }),
            activation,
            params: Vec::new(),
            seed: 0,
        }
    }

    /// Linear function with the bias weight set so every input starts at `init_value`.
    pub fn linear(features: FeatureMap, activation: Activation, init_value: f64) -> Self {
        let mut params = vec![0.0; features.dim()];
        params[features.bias_index()] = activation.inverse(init_value);
        Approximator {
            kind: ApproxKind::Linear(features),
            activation,
            params,
            seed: 0,
        }
    }

    /// GeLU network `dim -> hidden... -> 1`; the output bias is offset so
    /// outputs start near `init_value`.
    pub fn mlp(features: FeatureMap, hidden: &[usize], activation: Activation, seed: u64, init_value: f64) -> Self {
        let mut sizes = vec![features.dim()];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let stack = Stack::new(sizes, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = stack.init(&mut rng);
        let last = stack.n_layers() - 1;
        // Shrink the output layer so the initial function is close to constant.
        let n_in = stack.sizes[last];
        let off = stack.n_params() - n_in - 1;
        params[off..off + n_in].iter_mut().for_each(|w| *w *= 0.1);
        params[stack.last_bias_index(0)] = activation.inverse(init_value);
        Approximator {
            kind: ApproxKind::Mlp { features, stack },
            activation,
            params,
            seed,
        }
    }

    pub fn kind(&self) -> &ApproxKind {
        &self.kind
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            ApproxKind::Tabular(_) => "tabular",
            ApproxKind::Linear(_) => "linear",
            ApproxKind::Mlp { .. } => "mlp",
        }
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Value returned for pairs absent from a table.
    pub fn init_value(&self) -> Option<f64> {
        match &self.kind {
            ApproxKind::Tabular(t) => Some(self.activation.apply(t.init_param)),
            _ => None,
        }
    }

    /// Resolves a pair without modifying the approximator.
    pub fn encode(&self, pair: &StateActionPair) -> Result<Input> {
        match &self.kind {
            ApproxKind::Tabular(t) => Ok(Input::Slot(t.slots.get(&t.keying.key(pair)?).copied())),
            ApproxKind::Linear(f) | ApproxKind::Mlp { features: f, .. } => {
                Ok(Input::Dense(f.features(pair)?))
            }
        }
    }

    /// Resolves a pair, registering a fresh slot for unseen tabular keys.
    pub fn encode_or_insert(&mut self, pair: &StateActionPair) -> Result<Input> {
        match &mut self.kind {
            ApproxKind::Tabular(t) => {
                let key = t.keying.key(pair)?;
                let next = t.slots.len();
                let slot = *t.slots.entry(key).or_insert(next);
                if slot == next {
                    self.params.push(t.init_param);
                }
                Ok(Input::Slot(Some(slot)))
            }
            _ => self.encode(pair),
        }
    }

    pub fn contains(&self, pair: &StateActionPair) -> Result<bool> {
        Ok(match &self.kind {
            ApproxKind::Tabular(t) => t.slots.contains_key(&t.keying.key(pair)?),
            _ => true,
        })
    }

    fn check_dense(&self, x: &[f64]) -> Result<()> {
        let dim = match &self.kind {
            ApproxKind::Linear(f) | ApproxKind::Mlp { features: f, .. } => f.dim(),
            ApproxKind::Tabular(_) => {
                return Err(OpeError::Config("dense input to a tabular approximator".into()))
            }
        };
        if x.len() != dim {
            return Err(OpeError::DimensionMismatch {
                expected: dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn pre_activation(&self, input: &Input) -> Result<f64> {
        match (&self.kind, input) {
            (ApproxKind::Tabular(t), Input::Slot(slot)) => {
                Ok(slot.map_or(t.init_param, |s| self.params[s]))
            }
            (ApproxKind::Linear(_), Input::Dense(x)) => {
                self.check_dense(x)?;
                Ok(self.params.iter().zip(x).map(|(w, v)| w * v).sum())
            }
            (ApproxKind::Mlp { stack, .. }, Input::Dense(x)) => {
                self.check_dense(x)?;
                Ok(stack.forward(&self.params, x).output()[0])
            }
            _ => Err(OpeError::Config("input kind does not match approximator".into())),
        }
    }

    pub fn value(&self, input: &Input) -> Result<f64> {
        Ok(self.activation.apply(self.pre_activation(input)?))
    }

    /// Adds `upstream * d value / d params` to `grad` and returns the value.
    pub fn backward(&self, input: &Input, upstream: f64, grad: &mut [f64]) -> Result<f64> {
        if grad.len() != self.params.len() {
            return Err(OpeError::DimensionMismatch {
                expected: self.params.len(),
                got: grad.len(),
            });
        }
        match (&self.kind, input) {
            (ApproxKind::Tabular(t), Input::Slot(slot)) => match slot {
                Some(s) => {
                    let y = self.params[*s];
                    grad[*s] += upstream * self.activation.derivative(y);
                    Ok(self.activation.apply(y))
                }
                None => Ok(self.activation.apply(t.init_param)),
            },
            (ApproxKind::Linear(_), Input::Dense(x)) => {
                self.check_dense(x)?;
                let y: f64 = self.params.iter().zip(x).map(|(w, v)| w * v).sum();
                let d = upstream * self.activation.derivative(y);
                grad.iter_mut().zip(x).for_each(|(g, v)| *g += d * v);
                Ok(self.activation.apply(y))
            }
            (ApproxKind::Mlp { stack, .. }, Input::Dense(x)) => {
                self.check_dense(x)?;
                let tape = stack.forward(&self.params, x);
                let y = tape.output()[0];
                let d = upstream * self.activation.derivative(y);
                stack.backward(&self.params, &tape, &[d], grad);
                Ok(self.activation.apply(y))
            }
            _ => Err(OpeError::Config("input kind does not match approximator".into())),
        }
    }

    pub fn evaluate(&self, pair: &StateActionPair) -> Result<f64> {
        self.value(&self.encode(pair)?)
    }

    /// `d value / d params` at `pair`.
    pub fn gradient(&self, pair: &StateActionPair) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.params.len()];
        self.backward(&self.encode(pair)?, 1.0, &mut g)?;
        Ok(g)
    }

    /// Sets a tabular entry so the pair evaluates to `value`.
    pub fn set_value(&mut self, pair: &StateActionPair, value: f64) -> Result<()> {
        let act = self.activation;
        match self.encode_or_insert(pair)? {
            Input::Slot(Some(s)) => {
                self.params[s] = act.inverse(value);
                Ok(())
            }
            _ => Err(OpeError::Config("set_value is only defined for tabular approximators".into())),
        }
    }

    /// Values for every slot of a padded dialog. Real slots evaluate
    /// `(prefix_t, a_t)`, or `(prefix_t, substituted[t-1])` when given; pad
    /// slots read `pad_values[t-1]` without touching the approximator.
    /// Feature vectors are built incrementally along the dialog.
    pub fn batch_prefix_evaluate(
        &self,
        padded: &PaddedTrajectory,
        substituted: Option<&[Vec<Token>]>,
        pad_values: &[f64],
    ) -> Result<Vec<f64>> {
        let t_max = padded.t_max();
        if pad_values.len() != t_max {
            return Err(OpeError::LengthMismatch(format!(
                "{} pad values for horizon {t_max}",
                pad_values.len()
            )));
        }
        if let Some(sub) = substituted {
            if sub.len() != padded.original_length {
                return Err(OpeError::LengthMismatch(format!(
                    "{} substituted actions for {} real turns",
                    sub.len(),
                    padded.original_length
                )));
            }
        }
        let inputs: Vec<Input> = match &self.kind {
            ApproxKind::Tabular(_) => (1..=padded.original_length)
                .map(|t| match substituted {
                    Some(sub) => self.encode(&with_action(padded.pair(t), &sub[t - 1])),
                    None => self.encode(padded.pair(t)),
                })
                .collect::<Result<_>>()?,
            ApproxKind::Linear(f) | ApproxKind::Mlp { features: f, .. } => {
                dialog_features(f, padded, substituted)?
                    .into_iter()
                    .map(Input::Dense)
                    .collect()
            }
        };
        let mut out = Vec::with_capacity(t_max);
        for input in &inputs {
            out.push(self.value(input)?);
        }
        out.extend_from_slice(&pad_values[padded.original_length..]);
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let (dims, features, keying, keys) = match &self.kind {
            ApproxKind::Tabular(t) => (
                vec![t.slots.len()],
                None,
                Some(t.keying),
                Some(t.slots.keys().map(hex::encode).collect()),
            ),
            ApproxKind::Linear(f) => (vec![f.dim()], Some(*f), None, None),
            ApproxKind::Mlp { features, stack } => (stack.sizes.clone(), Some(*features), None, None),
        };
        Checkpoint {
            header: CheckpointHeader {
                kind: self.kind_name().to_string(),
                dims,
                seed: self.seed,
                activation: self.activation,
                features,
                keying,
                init_param: match &self.kind {
                    ApproxKind::Tabular(t) => Some(t.init_param),
                    _ => None,
                },
            },
            params: self.params.clone(),
            keys,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let h = &ck.header;
        let bad = |m: &str| OpeError::Config(format!("checkpoint: {m}"));
        let kind = match h.kind.as_str() {
            "tabular" => {
                let keys = ck.keys.as_ref().ok_or_else(|| bad("missing keys"))?;
                let mut slots = IndexMap::new();
                for (i, k) in keys.iter().enumerate() {
                    slots.insert(hex::decode(k).map_err(|e| bad(&e.to_string()))?, i);
                }
                ApproxKind::Tabular(TabularIndex {
                    keying: h.keying.ok_or_else(|| bad("missing keying"))?,
                    slots,
                    init_param: h.init_param.ok_or_else(|| bad("missing init"))?,
                })
            }
            "linear" => ApproxKind::Linear(h.features.ok_or_else(|| bad("missing features"))?),
            "mlp" => ApproxKind::Mlp {
                features: h.features.ok_or_else(|| bad("missing features"))?,
                stack: Stack::new(h.dims.clone(), false),
            },
            other => return Err(bad(&format!("unknown kind {other}"))),
        };
        let approx = Approximator {
            kind,
            activation: h.activation,
            params: ck.params.clone(),
            seed: h.seed,
        };
        let expected = match &approx.kind {
            ApproxKind::Tabular(t) => t.slots.len(),
            ApproxKind::Linear(f) => f.dim(),
            ApproxKind::Mlp { stack, .. } => stack.n_params(),
        };
        if expected != approx.params.len() {
            return Err(OpeError::DimensionMismatch {
                expected,
                got: approx.params.len(),
            });
        }
        Ok(approx)
    }

    /// Slot keys and values of a table, for inspection.
    pub fn table(&self) -> Option<BTreeMap<Vec<u8>, f64>> {
        match &self.kind {
            ApproxKind::Tabular(t) => Some(
                t.slots
                    .iter()
                    .map(|(k, &s)| (k.clone(), self.activation.apply(self.params[s])))
                    .collect(),
            ),
            _ => None,
        }
    }
}

fn with_action(pair: &StateActionPair, action: &[Token]) -> StateActionPair {
    StateActionPair {
        state: pair.state.clone(),
        action: crate::trajectory::PairAction::Turn(action.to_vec()),
        turn_index: pair.turn_index,
    }
}

/// Feature vectors for the real slots of a dialog, reusing prefix token
/// counts from one turn to the next.
pub fn dialog_features(
    map: &FeatureMap,
    padded: &PaddedTrajectory,
    substituted: Option<&[Vec<Token>]>,
) -> Result<Vec<Vec<f64>>> {
    let v = map.vocab_size;
    let mut env_counts = vec![0.0; v];
    let mut agent_counts = vec![0.0; v];
    let mut out = Vec::with_capacity(padded.original_length);
    let mut consumed = 0usize;
    for t in 1..=padded.original_length {
        let pair = padded.pair(t);
        let prefix = pair
            .prefix()
            .ok_or_else(|| OpeError::Config("pad before the end of a dialog".into()))?;
        for turn in &prefix[consumed..] {
            let counts = match turn.speaker {
                crate::trajectory::Speaker::Environment => &mut env_counts,
                crate::trajectory::Speaker::Agent => &mut agent_counts,
            };
            for &tok in &turn.tokens {
                if tok as usize >= v {
                    return Err(OpeError::DimensionMismatch {
                        expected: v,
                        got: tok as usize + 1,
                    });
                }
                counts[tok as usize] += 1.0;
            }
        }
        consumed = prefix.len();
        let action: &[Token] = match substituted {
            Some(sub) => &sub[t - 1],
            None => pair
                .action_tokens()
                .ok_or_else(|| OpeError::Config("NextPad on a real slot".into()))?,
        };
        if pair.turn_index > map.t_max {
            return Err(OpeError::DimensionMismatch {
                expected: map.t_max,
                got: pair.turn_index,
            });
        }
        let mut x = vec![0.0; map.dim()];
        let env_norm = t as f64;
        let agent_norm = (t - 1).max(1) as f64;
        for i in 0..v {
            x[i] = env_counts[i] / env_norm;
            x[v + i] = agent_counts[i] / agent_norm;
        }
        for &tok in action {
            if tok as usize >= v {
                return Err(OpeError::DimensionMismatch {
                    expected: v,
                    got: tok as usize + 1,
                });
            }
            x[2 * v + tok as usize] += 1.0;
        }
        x[3 * v + pair.turn_index] = 1.0;
        x[map.bias_index()] = 1.0;
        out.push(x);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub dims: Vec<usize>,
    pub seed: u64,
    pub activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<FeatureMap>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keying: Option<Keying>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_param: Option<f64>,
}

/// Parameter checkpoint: a header plus the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f64>,
    /// Hex-encoded slot keys, tabular only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keys: Option<Vec<String>>,
}
