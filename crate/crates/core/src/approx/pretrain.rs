//! Self-supervised warm start for a shared trunk: predict the token bag of
//! the environment's next turn from the current pair's features.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FeatureMap, SharedTrunk, Stack};
use crate::error::{OpeError, Result};
use crate::trajectory::PaddedTrajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 5,
            lr: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn examples(map: &FeatureMap, dialogs: &[PaddedTrajectory]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut out = Vec::new();
    for d in dialogs {
        for t in 1..=d.original_length {
            let x = map.features(d.pair(t))?;
            let mut y = vec![0.0; map.vocab_size];
            let next_env = d.pairs.get(t).and_then(|p| p.prefix()).and_then(|p| p.last());
            if let Some(turn) = next_env {
                for &tok in &turn.tokens {
                    let slot = y.get_mut(tok as usize).ok_or(OpeError::DimensionMismatch {
                        expected: map.vocab_size,
                        got: tok as usize + 1,
                    })?;
                    *slot += 1.0;
                }
            }
            out.push((x, y));
        }
    }
    Ok(out)
}

/// Trains the trunk (with a throwaway linear decoder) by per-example SGD on
/// squared error. Heads are left untouched.
pub fn pretrain_trunk(model: &mut SharedTrunk, dialogs: &[PaddedTrajectory], cfg: &PretrainConfig) -> Result<PretrainReport> {
    let data = examples(&model.features, dialogs)?;
    if data.is_empty() {
        return Err(OpeError::Empty("no pretraining examples".into()));
    }
    let width = *model.trunk.sizes.last().expect("trunk sizes");
    let decoder = Stack::new(vec![width, model.features.vocab_size], false);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dec_params = decoder.init(&mut rng);
    let mean_loss = |model: &SharedTrunk, dec: &[f64]| -> f64 {
        let total: f64 = data
            .iter()
            .map(|(x, y)| {
                let h = model.trunk.forward(&model.trunk_params, x);
                let o = decoder.forward(dec, h.output());
                o.output().iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            })
            .sum();
        total / data.len() as f64
    };
    let initial_loss = mean_loss(model, &dec_params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut g_trunk = vec![0.0; model.trunk_params.len()];
    let mut g_dec = vec![0.0; dec_params.len()];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (x, y) = &data[i];
            let tape = model.trunk.forward(&model.trunk_params, x);
            let dtape = decoder.forward(&dec_params, tape.output());
            let d_out: Vec<f64> = dtape.output().iter().zip(y).map(|(a, b)| 2.0 * (a - b)).collect();
            g_trunk.iter_mut().for_each(|g| *g = 0.0);
            g_dec.iter_mut().for_each(|g| *g = 0.0);
            let dh = decoder.backward(&dec_params, &dtape, &d_out, &mut g_dec);
            model.trunk.backward(&model.trunk_params, &tape, &dh, &mut g_trunk);
            for (p, g) in model.trunk_params.iter_mut().zip(&g_trunk) {
                *p -= cfg.lr * g;
            }
            for (p, g) in dec_params.iter_mut().zip(&g_dec) {
                *p -= cfg.lr * g;
            }
        }
    }
    let final_loss = mean_loss(model, &dec_params);
    if !final_loss.is_finite() {
        return Err(OpeError::NonFiniteGradient {
            step: cfg.epochs as u64,
            detail: "trunk pretraining diverged".into(),
        });
    }
    Ok(PretrainReport {
        initial_loss,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{pad_trajectory, Trajectory, Turn};

    #[test]
    fn pretraining_reduces_prediction_loss() {
        let dialogs: Vec<PaddedTrajectory> = (0..20)
            .map(|i| {
                let a = (i % 3) as u32;
                Trajectory::new(
                    "x",
                    vec![
                        Turn::env(vec![a]),
                        Turn::agent(vec![3]),
                        Turn::env(vec![(a + 1) % 3]),
                        Turn::agent(vec![4]),
                    ],
                    1.0,
                )
                .unwrap()
            })
            .map(|h| pad_trajectory(&h, 3).unwrap())
            .collect();
        let mut model = SharedTrunk::new(FeatureMap::new(5, 3), 8, 4, 1.0);
        let heads = (model.zeta_params.clone(), model.nu_params.clone());
        let report = pretrain_trunk(&mut model, &dialogs, &PretrainConfig::default()).unwrap();
        assert!(report.final_loss < report.initial_loss, "{report:?}");
        assert_eq!((model.zeta_params, model.nu_params), heads);
    }
}
