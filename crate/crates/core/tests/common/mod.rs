#![allow(dead_code)]

use ope_core::dice::{generate_expected_ope_data, DiceConfig, KeyingKind, ModelConfig, OpeDataset};
use ope_core::envs::random_mdp::{generate_random_mdp, random_policy, RandomMdpSpec};
use ope_core::tabular::{enumerate_trajectories, TabularMdp, TabularPolicy, DEFAULT_ENUMERATION_CAP};
use ope_core::trajectory::Trajectory;

pub struct Instance {
    pub mdp: TabularMdp,
    pub target: TabularPolicy,
    pub behavior: TabularPolicy,
}

/// Small MDP with a half-target, half-random behavior mixture.
pub fn instance(seed: u64) -> Instance {
    let spec = RandomMdpSpec {
        n_states: 6,
        n_actions: 3,
        branching: 2,
        min_len: 1,
        max_len: 4,
        sparse_rewards: false,
        t_max: None,
        seed,
    };
    let mdp = generate_random_mdp(&spec).unwrap();
    let target = random_policy(mdp.n_states, mdp.n_actions, 1000 + seed);
    let other = random_policy(mdp.n_states, mdp.n_actions, 2000 + seed);
    let behavior = TabularPolicy::mixture(&[(0.5, &target), (0.5, &other)]).unwrap();
    Instance { mdp, target, behavior }
}

/// Every behavior episode weighted by its probability, with exact target
/// next-action distributions.
pub fn enumerated_data(inst: &Instance) -> OpeDataset {
    let eps = enumerate_trajectories(&inst.mdp, &inst.behavior, DEFAULT_ENUMERATION_CAP).unwrap();
    let exp: Vec<Trajectory> = eps.iter().map(|(e, _)| e.to_trajectory("b")).collect();
    let w: Vec<f64> = eps.iter().map(|(_, p)| *p).collect();
    generate_expected_ope_data(&exp, &inst.target.on(&inst.mdp), inst.mdp.t_max)
        .unwrap()
        .with_weights(w)
        .unwrap()
}

pub fn last_turn_config(t_max: usize) -> DiceConfig {
    let mut cfg = DiceConfig::new(t_max);
    cfg.model = ModelConfig::Tabular {
        keying: KeyingKind::LastTurn,
    };
    cfg
}
