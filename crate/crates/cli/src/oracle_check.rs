//! Exact identities of the padded stationary distribution on random tabular MDPs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use ope_core::envs::random_mdp::{counterexample_mdp, generate_random_mdp, random_policy, RandomMdpSpec};
use ope_core::oracle::{
    augmented_value, stationary_by_fixed_point, stationary_by_formula, true_policy_value, unpadded_augmentation_value,
};
use ope_core::seed::{derive_seed, rng_for};
use ope_core::tabular::{build_augmented_kernel, TabularPolicy, DEFAULT_ENUMERATION_CAP as CAP};
use ope_core::Result;

pub const FORMULA_TOL: f64 = 1e-8;
pub const PAD_TOL: f64 = 1e-10;
pub const VALUE_TOL: f64 = 1e-8;
pub const COUNTEREXAMPLE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceCheck {
    pub seed: u64,
    pub n_states: usize,
    pub n_actions: usize,
    pub t_max: usize,
    pub formula_vs_fixed_point: f64,
    pub pad_weight_error: f64,
    pub value_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleCheck {
    pub policy_value: f64,
    pub padded_value: f64,
    pub unpadded_value: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheckReport {
    pub instances: Vec<InstanceCheck>,
    pub max_formula_vs_fixed_point: f64,
    pub max_pad_weight_error: f64,
    pub max_value_error: f64,
    pub counterexample: CounterexampleCheck,
    pub passed: bool,
}

/// A random spec within 20 states, 4 actions and horizon 6.
pub fn random_spec(seed: u64, index: u64) -> RandomMdpSpec {
    let mut rng = rng_for(seed, "oracle_spec", index);
    let max_len = rng.gen_range(1..=5);
    RandomMdpSpec {
        n_states: rng.gen_range(max_len..=20),
        n_actions: rng.gen_range(1..=4),
        branching: rng.gen_range(1..=2),
        min_len: rng.gen_range(1..=max_len),
        max_len,
        sparse_rewards: rng.gen_bool(0.5),
        t_max: Some(max_len + 1),
        seed: derive_seed(seed, "oracle_mdp", index),
    }
}

pub fn check_instance(spec: &RandomMdpSpec) -> Result<InstanceCheck> {
    let mdp = generate_random_mdp(spec)?;
    let pol = random_policy(mdp.n_states, mdp.n_actions, derive_seed(spec.seed, "policy", 0));
    let formula = stationary_by_formula(&mdp, &pol, CAP)?;
    let fixed = stationary_by_fixed_point(&build_augmented_kernel(&mdp)?, &pol, &Default::default())?;
    let rho = true_policy_value(&mdp, &pol, CAP)?;
    Ok(InstanceCheck {
        seed: spec.seed,
        n_states: mdp.n_states,
        n_actions: mdp.n_actions,
        t_max: mdp.t_max,
        formula_vs_fixed_point: formula.linf_distance(&fixed),
        pad_weight_error: (formula.last_pad_weight() - 1.0 / mdp.t_max as f64).abs(),
        value_error: (augmented_value(&formula, &mdp) * mdp.t_max as f64 - rho).abs(),
    })
}

pub fn check_counterexample() -> Result<CounterexampleCheck> {
    let mdp = counterexample_mdp();
    let pol = TabularPolicy::uniform(mdp.n_states, mdp.n_actions);
    let policy_value = true_policy_value(&mdp, &pol, CAP)?;
    let padded_value = augmented_value(&stationary_by_formula(&mdp, &pol, CAP)?, &mdp);
    let unpadded_value = unpadded_augmentation_value(&mdp, &pol, CAP)?;
    let passed = (policy_value - 0.8).abs() <= COUNTEREXAMPLE_TOL
        && (padded_value - 0.2).abs() <= COUNTEREXAMPLE_TOL
        && (unpadded_value - 0.8 / 2.8).abs() <= COUNTEREXAMPLE_TOL;
    Ok(CounterexampleCheck {
        policy_value,
        padded_value,
        unpadded_value,
        passed,
    })
}

/// Runs `n` random instances plus the fixed counterexample.
pub fn run_oracle_check(n: usize, seed: u64) -> Result<OracleCheckReport> {
    let instances = (0..n as u64)
        .map(|i| check_instance(&random_spec(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    let max = |f: fn(&InstanceCheck) -> f64| instances.iter().map(f).fold(0.0, f64::max);
    let max_formula_vs_fixed_point = max(|c| c.formula_vs_fixed_point);
    let max_pad_weight_error = max(|c| c.pad_weight_error);
    let max_value_error = max(|c| c.value_error);
    let counterexample = check_counterexample()?;
    let passed = max_formula_vs_fixed_point <= FORMULA_TOL
        && max_pad_weight_error <= PAD_TOL
        && max_value_error <= VALUE_TOL
        && counterexample.passed;
    Ok(OracleCheckReport {
        instances,
        max_formula_vs_fixed_point,
        max_pad_weight_error,
        max_value_error,
        counterexample,
        passed,
    })
}
