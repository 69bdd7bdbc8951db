//! Seeded random tabular MDPs for oracle tests.
//!
//! States are arranged in layers `1..=max_len`; layer `l` is only visited at
//! turn `l`, so every episode ends by `max_len`. Pairs in layers below
//! `min_len` never terminate and pairs in the last layer always do.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OpeError, Result};
use crate::tabular::{TabularMdp, TabularPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomMdpSpec {
    pub n_states: usize,
    pub n_actions: usize,
    /// Number of successor states per non-terminal pair (and support size of `mu0`).
    pub branching: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Terminal rewards in `{0, 1}` when set, uniform on `[0, 1]` otherwise.
    pub sparse_rewards: bool,
    /// Padding horizon; defaults to `max_len + 1`.
    #[serde(default)]
    pub t_max: Option<usize>,
    pub seed: u64,
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn spread(rng: &mut ChaCha8Rng, candidates: &[usize], branching: usize, n_states: usize) -> Vec<f64> {
    let k = branching.clamp(1, candidates.len());
    let chosen: Vec<usize> = candidates.choose_multiple(rng, k).copied().collect();
    let probs = random_simplex(rng, k);
    let mut row = vec![0.0; n_states];
    for (s, p) in chosen.into_iter().zip(probs) {
        row[s] += p;
    }
    row
}

pub fn generate_random_mdp(spec: &RandomMdpSpec) -> Result<TabularMdp> {
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(OpeError::Config("need 1 <= min_len <= max_len".into()));
    }
    if spec.n_states < spec.max_len || spec.n_actions == 0 {
        return Err(OpeError::Config("need n_states >= max_len and n_actions >= 1".into()));
    }
    let t_max = spec.t_max.unwrap_or(spec.max_len + 1);
    if t_max < spec.max_len {
        return Err(OpeError::Config("t_max below max_len".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // One state per layer, the rest assigned at random.
    let mut layer_of: Vec<usize> = (0..spec.max_len).collect();
    layer_of.extend((spec.max_len..spec.n_states).map(|_| rng.gen_range(0..spec.max_len)));
    let layers: Vec<Vec<usize>> = (0..spec.max_len)
        .map(|l| (0..spec.n_states).filter(|&s| layer_of[s] == l).collect())
        .collect();

    let n = spec.n_states;
    let na = spec.n_actions;
    let mu0 = spread(&mut rng, &layers[0], spec.branching, n);
    let mut kernel = Vec::with_capacity(n * na);
    let mut terminal_flag = Vec::with_capacity(n * na);
    let mut terminal_reward = Vec::with_capacity(n * na);
    for s in 0..n {
        let l = layer_of[s];
        for _ in 0..na {
            let last = l + 1 == spec.max_len;
            let terminal = if last {
                true
            } else if l + 1 < spec.min_len {
                false
            } else {
                rng.gen_bool(0.4)
            };
            kernel.push(if last {
                let mut row = vec![0.0; n];
                row[s] = 1.0;
                row
            } else {
                spread(&mut rng, &layers[l + 1], spec.branching, n)
            });
            terminal_flag.push(terminal);
            terminal_reward.push(if !terminal {
                0.0
            } else if spec.sparse_rewards {
                if rng.gen_bool(0.4) {
                    1.0
                } else {
                    0.0
                }
            } else {
                rng.gen_range(0.0..=1.0)
            });
        }
    }
    let mdp = TabularMdp {
        n_states: n,
        n_actions: na,
        mu0,
        kernel,
        terminal_reward,
        terminal_flag,
        t_max,
    };
    mdp.validate()?;
    Ok(mdp)
}

/// A full-support random policy.
pub fn random_policy(n_states: usize, n_actions: usize, seed: u64) -> TabularPolicy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TabularPolicy {
        probs: (0..n_states).map(|_| random_simplex(&mut rng, n_actions)).collect(),
    }
}

/// Two dialogs: length 2 with reward 0 (probability 0.2) and length 3 with
/// reward 1 (probability 0.8), padded to `t_max = 4`.
pub fn counterexample_mdp() -> TabularMdp {
    // States: 0 = A1, 1 = B1, 2 = A2, 3 = B2, 4 = B3.
    let mut kernel = vec![vec![0.0; 5]; 5];
    kernel[0][2] = 1.0;
    kernel[1][3] = 1.0;
    kernel[3][4] = 1.0;
    kernel[2][2] = 1.0;
    kernel[4][4] = 1.0;
    TabularMdp {
        n_states: 5,
        n_actions: 1,
        mu0: vec![0.2, 0.8, 0.0, 0.0, 0.0],
        kernel,
        terminal_reward: vec![0.0, 0.0, 0.0, 0.0, 1.0],
        terminal_flag: vec![false, false, true, false, true],
        t_max: 4,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::true_policy_value;
    use crate::tabular::{enumerate_trajectories, DEFAULT_ENUMERATION_CAP};

    fn spec(seed: u64) -> RandomMdpSpec {
        RandomMdpSpec {
            n_states: 12,
            n_actions: 3,
            branching: 2,
            min_len: 2,
            max_len: 5,
            sparse_rewards: seed.is_multiple_of(2),
            t_max: None,
            seed,
        }
    }

    #[test]
    fn fifty_random_specs_validate() {
        for seed in 0..50 {
            let mdp = generate_random_mdp(&spec(seed)).unwrap();
            mdp.validate().unwrap();
            assert_eq!(mdp.t_max, 6);
        }
    }

    #[test]
    fn same_seed_same_mdp() {
        assert_eq!(generate_random_mdp(&spec(3)).unwrap(), generate_random_mdp(&spec(3)).unwrap());
        assert_ne!(generate_random_mdp(&spec(3)).unwrap(), generate_random_mdp(&spec(4)).unwrap());
    }

    #[test]
    fn fixed_horizon_when_min_equals_max() {
        let s = RandomMdpSpec {
            min_len: 4,
            max_len: 4,
            ..spec(1)
        };
        let mdp = generate_random_mdp(&s).unwrap();
        let pol = random_policy(mdp.n_states, mdp.n_actions, 2);
        let eps = enumerate_trajectories(&mdp, &pol, DEFAULT_ENUMERATION_CAP).unwrap();
        assert!(eps.iter().all(|(e, _)| e.len() == 4));
        let total: f64 = eps.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn degenerate_single_state() {
        let s = RandomMdpSpec {
            n_states: 1,
            n_actions: 1,
            branching: 1,
            min_len: 1,
            max_len: 1,
            sparse_rewards: false,
            t_max: None,
            seed: 9,
        };
        let mdp = generate_random_mdp(&s).unwrap();
        let pol = TabularPolicy::uniform(1, 1);
        let eps = enumerate_trajectories(&mdp, &pol, 10).unwrap();
        assert_eq!(eps.len(), 1);
        assert_eq!(eps[0].1, 1.0);
        let rho = true_policy_value(&mdp, &pol, 10).unwrap();
        assert_eq!(rho, mdp.terminal_reward[0]);
    }

    #[test]
    fn counterexample_is_valid() {
        let mdp = counterexample_mdp();
        mdp.validate().unwrap();
        let eps = enumerate_trajectories(&mdp, &TabularPolicy::uniform(5, 1), 10).unwrap();
        let mut summary: Vec<(usize, f64, f64)> =
            eps.iter().map(|(e, p)| (e.len(), *p, e.reward)).collect();
        summary.sort_by_key(|a| a.0);
        assert_eq!(summary, vec![(2, 0.2, 0.0), (3, 0.8, 1.0)]);
    }
}
