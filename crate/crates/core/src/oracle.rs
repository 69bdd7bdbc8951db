//! Exact ground truth for tabular MDPs.
//!
//! Two independent routes to the stationary state-action distribution of the
//! padded chain are provided: a closed form that sums path probabilities over
//! enumerated conversation prefixes, and power iteration on the explicit
//! augmented kernel. They must agree; the tests and the acceptance suite
//! check that they do.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{OpeError, Result};
use crate::tabular::{
    enumerate_trajectories, AugPair, AugmentedMdp, MdpEpisode, TabularMdp, TabularPolicy,
};

/// Stationary distribution over pairs of the augmented chain.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDistribution {
    pub t_max: usize,
    pub weights: BTreeMap<AugPair, f64>,
}

impl StationaryDistribution {
    pub fn get(&self, pair: &AugPair) -> f64 {
        self.weights.get(pair).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.weights.values().sum()
    }

    /// Weight of `(Pad_{t_max}, NextPad)`.
    pub fn last_pad_weight(&self) -> f64 {
        self.get(&AugPair::Pad(self.t_max))
    }

    /// L-infinity distance over the union of both supports.
    pub fn linf_distance(&self, other: &StationaryDistribution) -> f64 {
        self.weights
            .keys()
            .chain(other.weights.keys())
            .map(|k| (self.get(k) - other.get(k)).abs())
            .fold(0.0, f64::max)
    }

    /// Slot-visitation distribution of a weighted set of padded episodes.
    pub fn from_episodes<'a>(
        episodes: impl IntoIterator<Item = (&'a MdpEpisode, f64)>,
        t_max: usize,
    ) -> Result<Self> {
        let mut weights = BTreeMap::new();
        let mut total = 0.0;
        for (ep, w) in episodes {
            if ep.len() > t_max {
                return Err(OpeError::LengthExceedsHorizon {
                    length: ep.len(),
                    t_max,
                });
            }
            for t in 1..=ep.len() {
                let key = AugPair::Real {
                    turn: t,
                    state: ep.states[t - 1],
                    action: ep.actions[t - 1],
                };
                *weights.entry(key).or_insert(0.0) += w;
            }
            for k in ep.len() + 1..=t_max {
                *weights.entry(AugPair::Pad(k)).or_insert(0.0) += w;
            }
            total += w * t_max as f64;
        }
        if total <= 0.0 {
            return Err(OpeError::Empty("episodes".into()));
        }
        weights.values_mut().for_each(|v| *v /= total);
        Ok(StationaryDistribution { t_max, weights })
    }

    /// JSON dump for debugging: `[{"pair": "...", "weight": w}, ...]`.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Entry {
            pair: String,
            weight: f64,
        }
        let entries: Vec<Entry> = self
            .weights
            .iter()
            .map(|(k, &weight)| Entry {
                pair: k.to_string(),
                weight,
            })
            .collect();
        serde_json::to_string(&entries).expect("serializes")
    }
}

/// `rho(pi) = sum_h Pr(h) R(s_T, a_T)` by exact enumeration.
pub fn true_policy_value(mdp: &TabularMdp, policy: &TabularPolicy, cap: usize) -> Result<f64> {
    Ok(enumerate_trajectories(mdp, policy, cap)?
        .iter()
        .map(|(ep, p)| p * ep.reward)
        .sum())
}

/// Closed form: each real pair gets `1/t_max` times the probability of the
/// prefix path that reaches it; each padded slot gets `1/t_max` times the
/// probability of the episodes it pads.
pub fn stationary_by_formula(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    cap: usize,
) -> Result<StationaryDistribution> {
    let t_max = mdp.t_max;
    let scale = 1.0 / t_max as f64;
    let mut weights = BTreeMap::new();
    let mut episodes = 0usize;
    let mut stack: Vec<(usize, usize, f64)> = (0..mdp.n_states)
        .filter(|&s| mdp.mu0[s] > 0.0)
        .map(|s| (1, s, mdp.mu0[s]))
        .collect();
    stack.reverse();
    while let Some((turn, state, p_state)) = stack.pop() {
        for action in 0..mdp.n_actions {
            let p = p_state * policy.prob(state, action);
            if p == 0.0 {
                continue;
            }
            *weights
                .entry(AugPair::Real { turn, state, action })
                .or_insert(0.0) += scale * p;
            if mdp.is_terminal(state, action) || turn >= t_max {
                episodes += 1;
                if episodes > cap {
                    return Err(OpeError::EnumerationCapExceeded { cap });
                }
                for k in turn + 1..=t_max {
                    *weights.entry(AugPair::Pad(k)).or_insert(0.0) += scale * p;
                }
            } else {
                for (s2, &ps) in mdp.kernel[mdp.sa(state, action)].iter().enumerate() {
                    if ps > 0.0 {
                        stack.push((turn + 1, s2, p * ps));
                    }
                }
            }
        }
    }
    Ok(StationaryDistribution { t_max, weights })
}

/// Mixture of per-policy stationary distributions: the slot distribution of
/// data collected by several behavior policies in the given proportions.
pub fn mixture_stationary(
    mdp: &TabularMdp,
    behaviors: &[(f64, &TabularPolicy)],
    cap: usize,
) -> Result<StationaryDistribution> {
    let total: f64 = behaviors.iter().map(|(w, _)| w).sum();
    let mut weights = BTreeMap::new();
    for (w, pol) in behaviors {
        for (k, v) in stationary_by_formula(mdp, pol, cap)?.weights {
            *weights.entry(k).or_insert(0.0) += w / total * v;
        }
    }
    Ok(StationaryDistribution {
        t_max: mdp.t_max,
        weights,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PowerInit {
    Uniform,
    Random(u64),
}

#[derive(Debug, Clone, Copy)]
pub struct PowerIterationOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub residual_tol: f64,
    pub init: PowerInit,
}

impl Default for PowerIterationOptions {
    fn default() -> Self {
        PowerIterationOptions {
            tol: 1e-12,
            max_iter: 100_000,
            residual_tol: 1e-10,
            init: PowerInit::Uniform,
        }
    }
}

struct Chain {
    succ: Vec<Vec<(usize, f64)>>,
}

impl Chain {
    fn step(&self, d: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; d.len()];
        for (x, &dx) in d.iter().enumerate() {
            if dx == 0.0 {
                continue;
            }
            for &(y, p) in &self.succ[x] {
                out[y] += dx * p;
            }
        }
        out
    }
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Solves the balance equations `d(y) = sum_x d(x) P(y|x)` by power iteration.
///
/// The chain is periodic with period `t_max`, so the `t_max`-step kernel is
/// iterated to convergence and the result averaged over one period.
pub fn stationary_by_fixed_point(
    aug: &AugmentedMdp,
    policy: &TabularPolicy,
    opts: &PowerIterationOptions,
) -> Result<StationaryDistribution> {
    let n = aug.n_pairs();
    let chain = Chain {
        succ: (0..n).map(|i| aug.successors(i, policy)).collect(),
    };
    let mut d: Vec<f64> = match opts.init {
        PowerInit::Uniform => vec![1.0; n],
        PowerInit::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| rng.gen::<f64>() + 1e-3).collect()
        }
    };
    let total: f64 = d.iter().sum();
    d.iter_mut().for_each(|x| *x /= total);

    let period = |d: &[f64]| {
        let mut cur = d.to_vec();
        for _ in 0..aug.t_max {
            cur = chain.step(&cur);
        }
        cur
    };

    let mut damped = false;
    let mut prev_delta = f64::INFINITY;
    let mut rising = 0;
    let mut converged = false;
    let mut delta = f64::INFINITY;
    for _ in 0..opts.max_iter {
        let mut next = period(&d);
        if damped {
            next.iter_mut().zip(&d).for_each(|(n, o)| *n = 0.5 * *n + 0.5 * o);
        }
        delta = linf(&next, &d);
        d = next;
        if delta <= opts.tol {
            converged = true;
            break;
        }
        if delta > prev_delta {
            rising += 1;
            if rising >= 3 {
                damped = true;
            }
        } else {
            rising = 0;
        }
        prev_delta = delta;
    }
    if !converged {
        return Err(OpeError::NonConvergence {
            iterations: opts.max_iter,
            residual: delta,
        });
    }

    let mut avg = vec![0.0; n];
    let mut cur = d;
    for _ in 0..aug.t_max {
        avg.iter_mut().zip(&cur).for_each(|(a, c)| *a += c);
        cur = chain.step(&cur);
    }
    let total: f64 = avg.iter().sum();
    avg.iter_mut().for_each(|a| *a /= total);

    let residual = linf(&chain.step(&avg), &avg);
    if residual > opts.residual_tol {
        return Err(OpeError::NonConvergence {
            iterations: opts.max_iter,
            residual,
        });
    }

    let weights = aug
        .pairs
        .iter()
        .zip(&avg)
        .filter(|(_, &w)| w > 0.0)
        .map(|(k, &w)| (*k, w))
        .collect();
    Ok(StationaryDistribution {
        t_max: aug.t_max,
        weights,
    })
}

/// L-infinity residual of the balance equations for `d`.
pub fn balance_residual(aug: &AugmentedMdp, policy: &TabularPolicy, d: &StationaryDistribution) -> f64 {
    let n = aug.n_pairs();
    let dv: Vec<f64> = aug.pairs.iter().map(|p| d.get(p)).collect();
    let chain = Chain {
        succ: (0..n).map(|i| aug.successors(i, policy)).collect(),
    };
    linf(&chain.step(&dv), &dv)
}

/// `rho_A(pi) = E_{d}[R(s, a)]`.
pub fn augmented_value(d: &StationaryDistribution, mdp: &TabularMdp) -> f64 {
    d.weights
        .iter()
        .map(|(pair, w)| match *pair {
            AugPair::Real { state, action, .. } => w * mdp.reward(state, action),
            AugPair::Pad(_) => 0.0,
        })
        .sum()
}

/// `zeta(x) = d_pi(x) / d_data(x)` on the support of `d_data`.
///
/// Every pair the target visits must be covered by the data.
pub fn true_density_ratio(
    d_pi: &StationaryDistribution,
    d_data: &StationaryDistribution,
) -> Result<BTreeMap<AugPair, f64>> {
    let uncovered: Vec<String> = d_pi
        .weights
        .iter()
        .filter(|(k, &w)| w > 0.0 && d_data.get(k) <= 0.0)
        .map(|(k, _)| k.to_string())
        .collect();
    if !uncovered.is_empty() {
        return Err(OpeError::CoverageViolation { uncovered });
    }
    Ok(d_data
        .weights
        .iter()
        .filter(|(_, &w)| w > 0.0)
        .map(|(k, &w)| (*k, d_pi.get(k) / w))
        .collect())
}

/// Average reward of the infinite concatenation of unpadded episodes:
/// `sum_h Pr(h) r_h / sum_h Pr(h) T_h`. Differs from `rho / t_max` whenever
/// episode lengths vary.
pub fn unpadded_augmentation_value(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    cap: usize,
) -> Result<f64> {
    let eps = enumerate_trajectories(mdp, policy, cap)?;
    let reward: f64 = eps.iter().map(|(e, p)| p * e.reward).sum();
    let length: f64 = eps.iter().map(|(e, p)| p * e.len() as f64).sum();
    Ok(reward / length)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::random_mdp::{counterexample_mdp, generate_random_mdp, random_policy, RandomMdpSpec};
    use crate::tabular::{build_augmented_kernel, DEFAULT_ENUMERATION_CAP as CAP};

    #[test]
    fn counterexample_values() {
        let mdp = counterexample_mdp();
        let pol = TabularPolicy::uniform(mdp.n_states, 1);
        assert!((true_policy_value(&mdp, &pol, CAP).unwrap() - 0.8).abs() < 1e-12);
        let d = stationary_by_formula(&mdp, &pol, CAP).unwrap();
        assert!((augmented_value(&d, &mdp) - 0.2).abs() < 1e-12);
        // Real pairs of the 0.2 branch weigh 0.2 / 4.
        assert!((d.get(&AugPair::Real { turn: 1, state: 0, action: 0 }) - 0.05).abs() < 1e-12);
        assert!((d.get(&AugPair::Real { turn: 2, state: 2, action: 0 }) - 0.05).abs() < 1e-12);
        assert!((d.last_pad_weight() - 0.25).abs() < 1e-12);
        let unpadded = unpadded_augmentation_value(&mdp, &pol, CAP).unwrap();
        assert!((unpadded - 0.8 / 2.8).abs() < 1e-12);
        assert!((unpadded - 0.8 / 4.0).abs() > 0.05);
    }

    #[test]
    fn single_full_length_dialog_is_uniform() {
        let spec = RandomMdpSpec {
            n_states: 3,
            n_actions: 1,
            branching: 1,
            min_len: 3,
            max_len: 3,
            sparse_rewards: false,
            t_max: Some(3),
            seed: 4,
        };
        let mdp = generate_random_mdp(&spec).unwrap();
        let pol = TabularPolicy::uniform(mdp.n_states, 1);
        let d = stationary_by_formula(&mdp, &pol, CAP).unwrap();
        assert_eq!(d.weights.len(), 3);
        for w in d.weights.values() {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
        let aug = build_augmented_kernel(&mdp).unwrap();
        let fp = stationary_by_fixed_point(&aug, &pol, &Default::default()).unwrap();
        assert!(fp.linf_distance(&d) < 1e-12);
    }

    #[test]
    fn zero_reward_mdp_has_zero_value() {
        let mut mdp = counterexample_mdp();
        mdp.terminal_reward.iter_mut().for_each(|r| *r = 0.0);
        let pol = TabularPolicy::uniform(mdp.n_states, 1);
        assert_eq!(true_policy_value(&mdp, &pol, CAP).unwrap(), 0.0);
        let d = stationary_by_formula(&mdp, &pol, CAP).unwrap();
        assert_eq!(augmented_value(&d, &mdp), 0.0);
    }

    #[test]
    fn ratio_examples() {
        let mk = |a: f64, b: f64| StationaryDistribution {
            t_max: 1,
            weights: [(AugPair::Pad(1), a), (AugPair::Real { turn: 1, state: 0, action: 0 }, b)]
                .into_iter()
                .collect(),
        };
        let z = true_density_ratio(&mk(0.75, 0.25), &mk(0.5, 0.5)).unwrap();
        assert_eq!(z[&AugPair::Pad(1)], 1.5);
        assert_eq!(z[&AugPair::Real { turn: 1, state: 0, action: 0 }], 0.5);
        let same = true_density_ratio(&mk(0.3, 0.7), &mk(0.3, 0.7)).unwrap();
        assert!(same.values().all(|&v| v == 1.0));
        let err = true_density_ratio(&mk(0.5, 0.5), &mk(1.0, 0.0)).unwrap_err();
        assert!(matches!(err, OpeError::CoverageViolation { ref uncovered } if uncovered.len() == 1));
    }

    fn instance(seed: u64) -> (TabularMdp, TabularPolicy) {
        let spec = RandomMdpSpec {
            n_states: 9,
            n_actions: 3,
            branching: 2,
            min_len: 1,
            max_len: 4,
            sparse_rewards: true,
            t_max: Some(5),
            seed,
        };
        let mdp = generate_random_mdp(&spec).unwrap();
        let pol = random_policy(mdp.n_states, mdp.n_actions, seed + 100);
        (mdp, pol)
    }

    #[test]
    fn formula_matches_fixed_point_and_identities() {
        for seed in 0..10 {
            let (mdp, pol) = instance(seed);
            let f = stationary_by_formula(&mdp, &pol, CAP).unwrap();
            let aug = build_augmented_kernel(&mdp).unwrap();
            let fp = stationary_by_fixed_point(&aug, &pol, &Default::default()).unwrap();
            assert!(f.linf_distance(&fp) <= 1e-8, "seed {seed}");
            assert!((f.total() - 1.0).abs() < 1e-10);
            assert!((f.last_pad_weight() - 1.0 / mdp.t_max as f64).abs() < 1e-10);
            assert!(balance_residual(&aug, &pol, &f) < 1e-10);
            let rho = true_policy_value(&mdp, &pol, CAP).unwrap();
            assert!((augmented_value(&f, &mdp) * mdp.t_max as f64 - rho).abs() < 1e-8);
        }
    }

    #[test]
    fn fixed_point_is_unique_across_initializations() {
        let (mdp, pol) = instance(3);
        let aug = build_augmented_kernel(&mdp).unwrap();
        let base = stationary_by_fixed_point(&aug, &pol, &Default::default()).unwrap();
        for init in 0..10 {
            let opts = PowerIterationOptions {
                init: PowerInit::Random(init),
                ..Default::default()
            };
            let d = stationary_by_fixed_point(&aug, &pol, &opts).unwrap();
            assert!(d.linf_distance(&base) <= 1e-8);
        }
    }

    #[test]
    fn stationarity_functional() {
        // E_d[nu(successor)] = E_d[nu] for arbitrary nu.
        let (mdp, pol) = instance(5);
        let aug = build_augmented_kernel(&mdp).unwrap();
        let d = stationary_by_formula(&mdp, &pol, CAP).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let nu: Vec<f64> = (0..aug.n_pairs()).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut lhs = 0.0;
        let mut rhs = 0.0;
        for (i, pair) in aug.pairs.iter().enumerate() {
            let w = d.get(pair);
            rhs += w * nu[i];
            lhs += w * aug.successors(i, &pol).iter().map(|&(j, p)| p * nu[j]).sum::<f64>();
        }
        assert!((lhs - rhs).abs() < 1e-8);
    }

    #[test]
    fn oracle_ratio_reproduces_augmented_value() {
        let (mdp, target) = instance(7);
        let behavior = random_policy(mdp.n_states, mdp.n_actions, 77);
        let d_pi = stationary_by_formula(&mdp, &target, CAP).unwrap();
        let d_b = stationary_by_formula(&mdp, &behavior, CAP).unwrap();
        let zeta = true_density_ratio(&d_pi, &d_b).unwrap();
        let mean_zeta: f64 = zeta.iter().map(|(k, z)| d_b.get(k) * z).sum();
        assert!((mean_zeta - 1.0).abs() < 1e-8);
        let weighted: f64 = zeta
            .iter()
            .map(|(k, z)| d_b.get(k) * z * aug_reward(&mdp, k))
            .sum();
        assert!((weighted - augmented_value(&d_pi, &mdp)).abs() < 1e-8);
    }

    fn aug_reward(mdp: &TabularMdp, k: &AugPair) -> f64 {
        match *k {
            AugPair::Real { state, action, .. } => mdp.reward(state, action),
            AugPair::Pad(_) => 0.0,
        }
    }

    #[test]
    fn empirical_distribution_matches_formula_on_weighted_enumeration() {
        let (mdp, pol) = instance(11);
        let eps = enumerate_trajectories(&mdp, &pol, CAP).unwrap();
        let emp = StationaryDistribution::from_episodes(eps.iter().map(|(e, p)| (e, *p)), mdp.t_max).unwrap();
        let f = stationary_by_formula(&mdp, &pol, CAP).unwrap();
        assert!(emp.linf_distance(&f) < 1e-12);
    }

    #[test]
    fn json_dump() {
        let mdp = counterexample_mdp();
        let d = stationary_by_formula(&mdp, &TabularPolicy::uniform(mdp.n_states, 1), CAP).unwrap();
        let v: serde_json::Value = serde_json::from_str(&d.to_json()).unwrap();
        assert_eq!(v.as_array().unwrap().len(), d.weights.len());
    }
}
