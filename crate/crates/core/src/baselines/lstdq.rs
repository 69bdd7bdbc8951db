use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::approx::FeatureMap;
use crate::dice::{KeyingKind, OpeDataset};
use crate::error::{OpeError, Result};
use crate::trajectory::{StateActionPair, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NextAction {
    /// Successor value at the drawn target action.
    #[default]
    Sampled,
    /// Successor value averaged over the target's action distribution
    /// (requires a dataset built with exact distributions).
    Expected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LstdqFeatures {
    Tabular {
        #[serde(default)]
        keying: KeyingKind,
    },
    Linear,
}

fn d_ridge() -> f64 {
    1e-6
}

fn d_features() -> LstdqFeatures {
    LstdqFeatures::Linear
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LstdqConfig {
    #[serde(default = "d_features")]
    pub features: LstdqFeatures,
    #[serde(default)]
    pub next_action: NextAction,
    #[serde(default = "d_ridge")]
    pub ridge: f64,
    #[serde(default)]
    pub vocab_size: Option<usize>,
}

impl Default for LstdqConfig {
    fn default() -> Self {
        LstdqConfig {
            features: d_features(),
            next_action: NextAction::Sampled,
            ridge: d_ridge(),
            vocab_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstdqOutput {
    pub estimate: f64,
    pub dim: usize,
    /// Set when the system was singular and a ridge least-squares solve was used.
    pub regularized: bool,
}

/// Sparse feature vector.
type Phi = Vec<(usize, f64)>;

enum Featurizer {
    Table {
        keying: crate::approx::Keying,
        index: IndexMap<Vec<u8>, usize>,
    },
    Linear(FeatureMap),
}

impl Featurizer {
    fn phi(&mut self, pair: &StateActionPair) -> Result<Phi> {
        match self {
            Featurizer::Table { keying, index } => {
                let key = keying.key(pair)?;
                let next = index.len();
                Ok(vec![(*index.entry(key).or_insert(next), 1.0)])
            }
            Featurizer::Linear(map) => Ok(map
                .features(pair)?
                .into_iter()
                .enumerate()
                .filter(|(_, v)| *v != 0.0)
                .collect()),
        }
    }
}

fn candidates(data: &OpeDataset, i: usize, t: usize, mode: NextAction) -> Result<Vec<(&[Token], f64)>> {
    match mode {
        NextAction::Sampled => Ok(vec![(data.target_actions[i][t - 1].as_slice(), 1.0)]),
        NextAction::Expected => match &data.target_distributions {
            Some(_) => Ok(data.next_actions(i, t)),
            None => Err(OpeError::Config(
                "expected next actions need a dataset with target distributions".into(),
            )),
        },
    }
}

fn expected_phi(
    feat: &mut Featurizer,
    data: &OpeDataset,
    i: usize,
    t: usize,
    mode: NextAction,
) -> Result<Phi> {
    let prefix = data.dialogs[i]
        .pair(t)
        .prefix()
        .ok_or_else(|| OpeError::InvalidTrajectory("pad in real slot".into()))?
        .to_vec();
    let mut out: Phi = Vec::new();
    for (a, p) in candidates(data, i, t, mode)? {
        let pair = StateActionPair::real(prefix.clone(), a.to_vec(), t);
        out.extend(feat.phi(&pair)?.into_iter().map(|(j, v)| (j, v * p)));
    }
    Ok(out)
}

/// Least-squares TD on padded episodes with target-action successors.
///
/// Within an episode `Q(x_t) = E[Q(s_{t+1}, ã_{t+1})]` and
/// `Q(x_T) = r`; pads carry zero features, so the fixed point is undiscounted
/// and `E_{s_1}[Q(s_1, ã_1)]` is the policy value.
pub fn lstdq_estimate(data: &OpeDataset, cfg: &LstdqConfig) -> Result<LstdqOutput> {
    data.validate()?;
    if data.is_empty() {
        return Err(OpeError::Empty("experience".into()));
    }
    let mut feat = match cfg.features {
        LstdqFeatures::Tabular { keying } => Featurizer::Table {
            keying: keying.build(FeatureMap::new(
                cfg.vocab_size.unwrap_or_else(|| data.vocab_size()),
                data.t_max,
            )),
            index: IndexMap::new(),
        },
        LstdqFeatures::Linear => Featurizer::Linear(FeatureMap::new(
            cfg.vocab_size.unwrap_or_else(|| data.vocab_size()),
            data.t_max,
        )),
    };
    // (weight, φ(x_t), φ(next), reward) rows, then the initial-state features.
    let mut rows: Vec<(f64, Phi, Phi, f64)> = Vec::new();
    let mut starts: Vec<(f64, Phi)> = Vec::new();
    for (i, d) in data.dialogs.iter().enumerate() {
        let w = data.weights[i];
        if w == 0.0 {
            continue;
        }
        for t in 1..=d.original_length {
            let phi = feat.phi(d.pair(t))?;
            let (next, r) = if t < d.original_length {
                (expected_phi(&mut feat, data, i, t + 1, cfg.next_action)?, 0.0)
            } else {
                (Vec::new(), d.reward)
            };
            rows.push((w, phi, next, r));
        }
        starts.push((w, expected_phi(&mut feat, data, i, 1, cfg.next_action)?));
    }
    let dim = match &feat {
        Featurizer::Table { index, .. } => index.len(),
        Featurizer::Linear(map) => map.dim(),
    };
    let mut a = DMatrix::<f64>::zeros(dim, dim);
    let mut b = DVector::<f64>::zeros(dim);
    for (w, phi, next, r) in &rows {
        for &(j, vj) in phi {
            for &(k, vk) in phi {
                a[(j, k)] += w * vj * vk;
            }
            for &(k, vk) in next {
                a[(j, k)] -= w * vj * vk;
            }
            b[j] += w * vj * r;
        }
    }
    let (theta, regularized) = solve(&a, &b, cfg.ridge)?;
    let total_w: f64 = starts.iter().map(|(w, _)| w).sum();
    let estimate = starts
        .iter()
        .map(|(w, phi)| w * phi.iter().map(|&(j, v)| v * theta[j]).sum::<f64>())
        .sum::<f64>()
        / total_w;
    if !estimate.is_finite() {
        return Err(OpeError::NonFiniteGradient {
            step: 0,
            detail: "LSTDQ solution is not finite".into(),
        });
    }
    Ok(LstdqOutput {
        estimate,
        dim,
        regularized,
    })
}

fn solve(a: &DMatrix<f64>, b: &DVector<f64>, ridge: f64) -> Result<(DVector<f64>, bool)> {
    let n = a.nrows();
    if n == 0 {
        return Ok((DVector::zeros(0), false));
    }
    let svd = a.clone().svd(false, false);
    let sv = &svd.singular_values;
    let max = sv.max();
    let min = sv.min();
    if max > 0.0 && min > max * 1e-10 {
        if let Some(x) = a.clone().lu().solve(b) {
            return Ok((x, false));
        }
    }
    let at = a.transpose();
    let mut normal = &at * a;
    for i in 0..n {
        normal[(i, i)] += ridge;
    }
    let rhs = &at * b;
    let x = normal
        .cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or_else(|| OpeError::Config("ridge system is not positive definite".into()))?;
    Ok((x, true))
}
