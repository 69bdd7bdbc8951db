use std::collections::BTreeSet;

use super::{DiceConfig, ModelConfig, OpeDataset};
use crate::approx::{
    dialog_features, pretrain_trunk, Activation, Approximator, FeatureMap, Input, Keying, SharedGrad, SharedTrunk,
};
use crate::error::{OpeError, Result};
use crate::seed::derive_seed;
use crate::trajectory::{StateActionPair, Token};

/// The ζ and ν function pair.
#[derive(Debug, Clone)]
pub enum Critic {
    Separate { zeta: Approximator, nu: Approximator },
    Shared(SharedTrunk),
}

#[derive(Debug, Clone, PartialEq)]
pub enum CriticGrad {
    Separate { zeta: Vec<f64>, nu: Vec<f64> },
    Shared(SharedGrad),
}

/// Approximator inputs for one dialog, resolved once.
#[derive(Debug, Clone)]
pub struct EncodedDialog {
    pub len: usize,
    pub reward: f64,
    pub weight: f64,
    /// `(ζ input, ν input)` at each logged pair.
    pub data: Vec<(Input, Input)>,
    /// ν inputs for the target's next action at each turn, with probabilities.
    pub next: Vec<Vec<(Input, f64)>>,
}

/// Approximator outputs on the real slots of one dialog.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogValues {
    pub zeta: Vec<f64>,
    pub nu: Vec<f64>,
    /// Target-action value `ν(s_t, ã_t)` (expected over the distribution when given).
    pub nu_next: Vec<f64>,
}

impl Critic {
    pub fn build(cfg: &DiceConfig, data: &OpeDataset) -> Result<Critic> {
        let vocab = cfg.vocab_size.unwrap_or_else(|| data.vocab_size());
        let map = FeatureMap::new(vocab, cfg.t_max);
        Ok(match &cfg.model {
            ModelConfig::Tabular { keying } => Critic::Separate {
                zeta: Approximator::tabular(keying.build(map), Activation::Square, 1.0),
                nu: Approximator::tabular(keying.build(map), Activation::Identity, 0.0),
            },
            ModelConfig::Linear => Critic::Separate {
                zeta: Approximator::linear(map, Activation::Square, 1.0),
                nu: Approximator::linear(map, Activation::Identity, 0.0),
            },
            ModelConfig::Mlp { hidden } => Critic::Separate {
                zeta: Approximator::mlp(map, hidden, Activation::Square, derive_seed(cfg.seed, "zeta", 0), 1.0),
                nu: Approximator::mlp(map, hidden, Activation::Identity, derive_seed(cfg.seed, "nu", 0), 0.0),
            },
            ModelConfig::Shared { width, pretrain } => {
                let mut model = SharedTrunk::new(map, *width, derive_seed(cfg.seed, "shared", 0), 1.0);
                if let Some(p) = pretrain {
                    pretrain_trunk(&mut model, &data.dialogs, p)?;
                }
                Critic::Shared(model)
            }
        })
    }

    pub fn feature_map(&self) -> Option<FeatureMap> {
        match self {
            Critic::Shared(m) => Some(m.features),
            Critic::Separate { zeta, .. } => match zeta.kind() {
                crate::approx::ApproxKind::Tabular(_) => None,
                crate::approx::ApproxKind::Linear(f) => Some(*f),
                crate::approx::ApproxKind::Mlp { features, .. } => Some(*features),
            },
        }
    }

    /// Key used for coverage accounting.
    pub fn coverage_keying(&self, fallback: FeatureMap) -> Keying {
        match self {
            Critic::Separate { zeta, .. } => match zeta.kind() {
                crate::approx::ApproxKind::Tabular(t) => t.keying,
                _ => Keying::Features { map: fallback },
            },
            Critic::Shared(_) => Keying::Features { map: fallback },
        }
    }

    pub fn zeros(&self) -> CriticGrad {
        match self {
            Critic::Separate { zeta, nu } => CriticGrad::Separate {
                zeta: vec![0.0; zeta.n_params()],
                nu: vec![0.0; nu.n_params()],
            },
            Critic::Shared(m) => CriticGrad::Shared(SharedGrad::zeros(m)),
        }
    }

    /// Resolves the inputs of dialog `i`. With `register`, unseen tabular
    /// keys get fresh slots: logged pairs in both ζ and ν, target pairs in ν.
    pub fn encode(&mut self, data: &OpeDataset, i: usize, register: bool) -> Result<EncodedDialog> {
        let d = &data.dialogs[i];
        let len = d.original_length;
        let mut next_pairs: Vec<Vec<(StateActionPair, Vec<Token>, f64)>> = Vec::with_capacity(len);
        for t in 1..=len {
            let prefix = d
                .pair(t)
                .prefix()
                .ok_or_else(|| OpeError::InvalidTrajectory(format!("slot {t} is a pad")))?;
            next_pairs.push(
                data.next_actions(i, t)
                    .into_iter()
                    .map(|(a, p)| (StateActionPair::real(prefix.to_vec(), a.to_vec(), t), a.to_vec(), p))
                    .collect(),
            );
        }
        let (data_in, next) = match self {
            Critic::Separate { zeta, nu } if zeta.kind_name() == "tabular" => {
                let mut data_in = Vec::with_capacity(len);
                for t in 1..=len {
                    let pair = d.pair(t);
                    data_in.push(if register {
                        (zeta.encode_or_insert(pair)?, nu.encode_or_insert(pair)?)
                    } else {
                        (zeta.encode(pair)?, nu.encode(pair)?)
                    });
                }
                let mut next = Vec::with_capacity(len);
                for cands in &next_pairs {
                    let mut row = Vec::with_capacity(cands.len());
                    for (pair, _, p) in cands {
                        let input = if register {
                            nu.encode_or_insert(pair)?
                        } else {
                            nu.encode(pair)?
                        };
                        row.push((input, *p));
                    }
                    next.push(row);
                }
                (data_in, next)
            }
            _ => {
                let map = self.feature_map().expect("dense critic has a feature map");
                let xs = dialog_features(&map, d, None)?;
                let data_in = xs.into_iter().map(|x| (Input::Dense(x.clone()), Input::Dense(x))).collect();
                let single = next_pairs.iter().all(|c| c.len() == 1);
                let next = if single {
                    let sub: Vec<Vec<Token>> = next_pairs.iter().map(|c| c[0].1.clone()).collect();
                    dialog_features(&map, d, Some(&sub))?
                        .into_iter()
                        .map(|x| vec![(Input::Dense(x), 1.0)])
                        .collect()
                } else {
                    next_pairs
                        .iter()
                        .map(|cands| {
                            cands
                                .iter()
                                .map(|(pair, _, p)| Ok((Input::Dense(map.features(pair)?), *p)))
                                .collect::<Result<Vec<_>>>()
                        })
                        .collect::<Result<Vec<_>>>()?
                };
                (data_in, next)
            }
        };
        Ok(EncodedDialog {
            len,
            reward: d.reward,
            weight: data.weights[i],
            data: data_in,
            next,
        })
    }

    pub fn values(&self, enc: &EncodedDialog) -> Result<DialogValues> {
        let mut out = DialogValues {
            zeta: Vec::with_capacity(enc.len),
            nu: Vec::with_capacity(enc.len),
            nu_next: Vec::with_capacity(enc.len),
        };
        for ((zi, ni), cands) in enc.data.iter().zip(&enc.next) {
            match self {
                Critic::Separate { zeta, nu } => {
                    out.zeta.push(zeta.value(zi)?);
                    out.nu.push(nu.value(ni)?);
                    let mut v = 0.0;
                    for (input, p) in cands {
                        v += p * nu.value(input)?;
                    }
                    out.nu_next.push(v);
                }
                Critic::Shared(m) => {
                    let (z, n) = m.evaluate(dense(zi)?)?;
                    out.zeta.push(z);
                    out.nu.push(n);
                    let mut v = 0.0;
                    for (input, p) in cands {
                        v += p * m.evaluate(dense(input)?)?.1;
                    }
                    out.nu_next.push(v);
                }
            }
        }
        Ok(out)
    }

    /// ζ at each logged pair only.
    pub fn zeta_values(&self, enc: &EncodedDialog) -> Result<Vec<f64>> {
        enc.data
            .iter()
            .map(|(zi, _)| match self {
                Critic::Separate { zeta, .. } => zeta.value(zi),
                Critic::Shared(m) => Ok(m.evaluate(dense(zi)?)?.0),
            })
            .collect()
    }

    /// Accumulates `scale` times the chain rule of per-slot upstream
    /// gradients into `grad`.
    pub fn backward(
        &self,
        enc: &EncodedDialog,
        up_zeta: &[f64],
        up_nu: &[f64],
        up_next: &[f64],
        scale: f64,
        grad: &mut CriticGrad,
    ) -> Result<()> {
        match (self, grad) {
            (Critic::Separate { zeta, nu }, CriticGrad::Separate { zeta: gz, nu: gn }) => {
                for (t, ((zi, ni), cands)) in enc.data.iter().zip(&enc.next).enumerate() {
                    if up_zeta[t] != 0.0 {
                        zeta.backward(zi, scale * up_zeta[t], gz)?;
                    }
                    if up_nu[t] != 0.0 {
                        nu.backward(ni, scale * up_nu[t], gn)?;
                    }
                    if up_next[t] != 0.0 {
                        for (input, p) in cands {
                            nu.backward(input, scale * up_next[t] * p, gn)?;
                        }
                    }
                }
            }
            (Critic::Shared(m), CriticGrad::Shared(g)) => {
                for (t, ((zi, _), cands)) in enc.data.iter().zip(&enc.next).enumerate() {
                    m.backward(dense(zi)?, scale * up_zeta[t], scale * up_nu[t], g)?;
                    if up_next[t] != 0.0 {
                        for (input, p) in cands {
                            m.backward(dense(input)?, 0.0, scale * up_next[t] * p, g)?;
                        }
                    }
                }
            }
            _ => return Err(OpeError::Config("gradient buffer does not match critic".into())),
        }
        Ok(())
    }

    /// Keys of every logged pair in `data`.
    pub fn data_keys(keying: &Keying, data: &OpeDataset) -> Result<BTreeSet<Vec<u8>>> {
        let mut keys = BTreeSet::new();
        for d in &data.dialogs {
            for t in 1..=d.original_length {
                keys.insert(keying.key(d.pair(t))?);
            }
        }
        Ok(keys)
    }
}

fn dense(input: &Input) -> Result<&[f64]> {
    match input {
        Input::Dense(x) => Ok(x),
        Input::Slot(_) => Err(OpeError::Config("slot input given to a dense critic".into())),
    }
}
