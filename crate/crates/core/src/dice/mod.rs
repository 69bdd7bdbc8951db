//! Density-ratio estimation on padded dialogs by regularized minimax
//! training, and the post-normalized value estimate built on it.

mod config;
mod data;
mod loss;
mod model;
mod train;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use config::{DiceConfig, KeyingKind, ModelConfig, Normalization, OptimizerKind, Regularizer};
pub use data::{generate_expected_ope_data, generate_ope_data, sample_target_actions, ActionDistribution, OpeDataset};
pub use loss::{dialog_loss, SlotGrads};
pub use model::{Critic, CriticGrad, DialogValues, EncodedDialog};
pub use train::{DiceGrad, DiceState};

use crate::approx::FeatureMap;
use crate::error::{OpeError, Result};
use crate::policy::Policy;
use crate::seed::rng_for;
use crate::tabular::{AugPair, TabularMdp};
use crate::trajectory::Trajectory;

/// `Σ w ζ r / Σ w ζ`.
pub fn normalized_ratio(zeta: &[f64], rewards: &[f64], weights: &[f64]) -> Result<f64> {
    if zeta.len() != rewards.len() || zeta.len() != weights.len() {
        return Err(OpeError::LengthMismatch("zeta, rewards and weights differ in length".into()));
    }
    if zeta.is_empty() {
        return Err(OpeError::Empty("no dialogs to normalize over".into()));
    }
    let zeta_sum: f64 = zeta.iter().zip(weights).map(|(z, w)| z * w).sum();
    let weighted_reward_sum: f64 = zeta.iter().zip(rewards).zip(weights).map(|((z, r), w)| z * r * w).sum();
    if !(zeta_sum > 1e-12) {
        return Err(OpeError::DegenerateNormalizer {
            zeta_sum,
            weighted_reward_sum,
        });
    }
    Ok(weighted_reward_sum / zeta_sum)
}

/// A trained state together with its encoded training data.
pub struct Trained {
    pub state: DiceState,
    pub encoded: Vec<EncodedDialog>,
}

impl Trained {
    fn terminal_zetas(&self) -> Result<Vec<f64>> {
        self.encoded
            .iter()
            .map(|e| Ok(*self.state.critic.zeta_values(e)?.last().expect("non-empty dialog")))
            .collect()
    }

    /// Post-normalized estimate on the training dialogs.
    pub fn estimate(&self, mode: Normalization) -> Result<f64> {
        estimate_encoded(&self.state, &self.encoded, mode)
    }

    /// Weighted mean of `ζ_T r` over dialogs, without normalization.
    pub fn unnormalized_estimate(&self) -> Result<f64> {
        let z = self.terminal_zetas()?;
        let w: f64 = self.encoded.iter().map(|e| e.weight).sum();
        if !(w > 0.0) {
            return Err(OpeError::Empty("zero total weight".into()));
        }
        Ok(self
            .encoded
            .iter()
            .zip(&z)
            .map(|(e, z)| e.weight * z * e.reward)
            .sum::<f64>()
            / w)
    }

    /// Weighted mean of ζ over every slot of the padded dialogs.
    pub fn mean_zeta(&self) -> Result<f64> {
        let pads = self.state.zeta_pad();
        let t_max = pads.len();
        let (mut num, mut den) = (0.0, 0.0);
        for e in &self.encoded {
            let z = self.state.critic.zeta_values(e)?;
            let s: f64 = z.iter().sum::<f64>() + pads[e.len..].iter().sum::<f64>();
            num += e.weight * s / t_max as f64;
            den += e.weight;
        }
        Ok(num / den)
    }
}

fn estimate_encoded(state: &DiceState, encoded: &[EncodedDialog], mode: Normalization) -> Result<f64> {
    let weights: Vec<f64> = encoded.iter().map(|e| e.weight).collect();
    let rewards: Vec<f64> = encoded.iter().map(|e| e.reward).collect();
    match mode {
        Normalization::TerminalPairs => {
            let z = encoded
                .iter()
                .map(|e| Ok(*state.critic.zeta_values(e)?.last().expect("non-empty dialog")))
                .collect::<Result<Vec<_>>>()?;
            normalized_ratio(&z, &rewards, &weights)
        }
        Normalization::AllPairs => {
            let pads = state.zeta_pad();
            let t_max = pads.len() as f64;
            let (mut zs, mut zr) = (0.0, 0.0);
            for (e, w) in encoded.iter().zip(&weights) {
                let z = state.critic.zeta_values(e)?;
                zs += w * (z.iter().sum::<f64>() + pads[e.len..].iter().sum::<f64>());
                zr += w * z[e.len - 1] * e.reward;
            }
            if !(zs > 1e-12) {
                return Err(OpeError::DegenerateNormalizer {
                    zeta_sum: zs,
                    weighted_reward_sum: zr,
                });
            }
            Ok(t_max * zr / zs)
        }
    }
}

/// Post-normalized estimate of a state on (possibly new) data. Pairs absent
/// from a tabular critic read its initialization value.
pub fn post_normalized_estimate(state: &DiceState, data: &OpeDataset, cfg: &DiceConfig) -> Result<f64> {
    let mut critic = state.critic.clone();
    let encoded = (0..data.len())
        .map(|i| critic.encode(data, i, false))
        .collect::<Result<Vec<_>>>()?;
    estimate_encoded(state, &encoded, cfg.normalize)
}

/// A tabular state whose ζ equals `ratio` on every logged pair and pad slot
/// of token-encoded `mdp` data, with ν = 0 and λ = 0. Needs LastTurn keying.
pub fn state_from_ratio(
    cfg: &DiceConfig,
    data: &OpeDataset,
    mdp: &TabularMdp,
    ratio: &BTreeMap<AugPair, f64>,
) -> Result<DiceState> {
    if cfg.model
        != (ModelConfig::Tabular {
            keying: KeyingKind::LastTurn,
        })
    {
        return Err(OpeError::Config("ratio injection needs a last-turn tabular critic".into()));
    }
    let mut critic = Critic::build(cfg, data)?;
    let Critic::Separate { zeta, .. } = &mut critic else {
        unreachable!("tabular critics are separate")
    };
    for d in &data.dialogs {
        for t in 1..=d.original_length {
            let pair = d.pair(t);
            let prefix = pair.prefix().expect("real slot");
            let aug = AugPair::Real {
                turn: t,
                state: mdp.decode_state(prefix)?,
                action: mdp.decode_action(pair.action_tokens().expect("real slot"))?,
            };
            zeta.set_value(pair, ratio.get(&aug).copied().unwrap_or(0.0))?;
        }
    }
    let mut state = DiceState::new(critic, cfg.t_max);
    for k in 1..=cfg.t_max {
        state.zeta_pad_raw[k - 1] = ratio.get(&AugPair::Pad(k)).copied().unwrap_or(0.0).sqrt();
    }
    state.lambda = 0.0;
    Ok(state)
}

/// Weighted mean loss of `state` over all of `data`.
pub fn mean_loss(state: &DiceState, data: &OpeDataset, cfg: &DiceConfig) -> Result<f64> {
    let mut critic = state.critic.clone();
    let encoded = (0..data.len())
        .map(|i| critic.encode(data, i, false))
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<usize> = (0..encoded.len()).collect();
    Ok(state.gradient(&encoded, &all, cfg)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub loss: f64,
    /// `None` when the normalizer was degenerate at this checkpoint.
    pub estimate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageStats {
    /// Distinct keys among logged pairs.
    pub data_pairs: usize,
    /// Target-action pairs evaluated at training and estimation time.
    pub target_pairs: usize,
    /// Target-action pairs whose key never occurs among logged pairs.
    pub unseen_target_pairs: usize,
    pub unseen_fraction: f64,
    /// Set when more than 5% of target pairs were unseen.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnigmaOutput {
    pub estimate: f64,
    pub unnormalized_estimate: f64,
    pub curve: Vec<CurvePoint>,
    pub coverage: CoverageStats,
    pub lambda: f64,
    pub mean_zeta: f64,
}

/// Report schema shared by every estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub agent_id: String,
    pub method: String,
    pub estimate: f64,
    pub config_hash: String,
    pub curve: Vec<CurvePoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage_stats: Option<CoverageStats>,
}

impl EstimateReport {
    pub fn from_enigma(agent_id: &str, out: &EnigmaOutput, cfg: &DiceConfig) -> Self {
        EstimateReport {
            agent_id: agent_id.to_string(),
            method: "enigma".into(),
            estimate: out.estimate,
            config_hash: cfg.hash(),
            curve: out.curve.clone(),
            coverage_stats: Some(out.coverage.clone()),
        }
    }
}

fn coverage(critic: &Critic, data: &OpeDataset, vocab: usize) -> Result<CoverageStats> {
    let keying = critic.coverage_keying(FeatureMap::new(vocab, data.t_max));
    let seen = Critic::data_keys(&keying, data)?;
    let mut target_pairs = 0;
    let mut unseen = 0;
    for (i, d) in data.dialogs.iter().enumerate() {
        for t in 1..=d.original_length {
            let prefix = d.pair(t).prefix().expect("real slot");
            for (a, p) in data.next_actions(i, t) {
                if p <= 0.0 {
                    continue;
                }
                target_pairs += 1;
                let pair = crate::trajectory::StateActionPair::real(prefix.to_vec(), a.to_vec(), t);
                if !seen.contains(&keying.key(&pair)?) {
                    unseen += 1;
                }
            }
        }
    }
    let unseen_fraction = if target_pairs == 0 {
        0.0
    } else {
        unseen as f64 / target_pairs as f64
    };
    Ok(CoverageStats {
        data_pairs: seen.len(),
        target_pairs,
        unseen_target_pairs: unseen,
        unseen_fraction,
        flagged: unseen_fraction > 0.05,
    })
}

/// Trains ζ and ν on a prepared dataset. `target` is needed only when target
/// actions are redrawn every step.
pub fn train(data: &mut OpeDataset, target: Option<&dyn Policy>, cfg: &DiceConfig) -> Result<(Trained, Vec<CurvePoint>)> {
    cfg.validate()?;
    data.validate()?;
    if data.is_empty() {
        return Err(OpeError::Empty("experience".into()));
    }
    if data.t_max != cfg.t_max {
        return Err(OpeError::Config(format!(
            "dataset padded to {} but config has t_max {}",
            data.t_max, cfg.t_max
        )));
    }
    if cfg.resample_target_actions && (target.is_none() || data.target_distributions.is_some()) {
        return Err(OpeError::Config(
            "resampling target actions needs a policy and sampled (not expected) actions".into(),
        ));
    }
    let mut critic = Critic::build(cfg, data)?;
    let mut encoded = (0..data.len())
        .map(|i| critic.encode(data, i, true))
        .collect::<Result<Vec<_>>>()?;
    let mut state = DiceState::new(critic, cfg.t_max);
    let n = data.len();
    let mut batch_rng = rng_for(cfg.seed, "batches", 0);
    let mut action_rng = rng_for(cfg.seed, "resample", 0);
    let every = (cfg.steps / 200).max(1);
    let mut curve = Vec::new();
    let full: Vec<usize> = (0..n).collect();
    for step in 1..=cfg.steps {
        let batch: Vec<usize> = if cfg.batch_size >= n {
            full.clone()
        } else {
            (0..cfg.batch_size).map(|_| batch_rng.gen_range(0..n)).collect()
        };
        if cfg.resample_target_actions {
            let policy = target.expect("checked above");
            for &i in &batch {
                data.target_actions[i] = sample_target_actions(&data.dialogs[i], policy, &mut action_rng)?;
                encoded[i] = state.critic.encode(data, i, true)?;
            }
        }
        let loss = state.train_step(&encoded, &batch, cfg)?;
        if step % every == 0 || step == cfg.steps {
            curve.push(CurvePoint {
                step,
                loss,
                estimate: estimate_encoded(&state, &encoded, cfg.normalize).ok(),
            });
        }
    }
    Ok((Trained { state, encoded }, curve))
}

/// Trains on `data` and reads off the estimate with diagnostics.
pub fn run_enigma_on(mut data: OpeDataset, target: Option<&dyn Policy>, cfg: &DiceConfig) -> Result<EnigmaOutput> {
    let (trained, curve) = train(&mut data, target, cfg)?;
    let vocab = cfg.vocab_size.unwrap_or_else(|| data.vocab_size());
    let coverage = coverage(&trained.state.critic, &data, vocab)?;
    if coverage.flagged {
        log::warn!(
            "{:.1}% of target pairs unseen in the data",
            100.0 * coverage.unseen_fraction
        );
    }
    Ok(EnigmaOutput {
        estimate: trained.estimate(cfg.normalize)?,
        unnormalized_estimate: trained.unnormalized_estimate()?,
        curve,
        coverage,
        lambda: trained.state.lambda,
        mean_zeta: trained.mean_zeta()?,
    })
}

/// End to end: draw target actions, train, post-normalize.
pub fn run_enigma(experience: &[Trajectory], target: &dyn Policy, cfg: &DiceConfig) -> Result<EnigmaOutput> {
    cfg.validate()?;
    let data = generate_ope_data(experience, target, cfg)?;
    run_enigma_on(data, Some(target), cfg)
}
