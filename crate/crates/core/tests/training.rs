//! End-to-end training of the density-ratio estimator.

mod common;

use common::{enumerated_data, instance, last_turn_config};
use ope_core::dice::{run_enigma, run_enigma_on, train, DiceConfig, ModelConfig, OptimizerKind};
use ope_core::oracle::true_policy_value;
use ope_core::seed::rng_for;
use ope_core::tabular::DEFAULT_ENUMERATION_CAP as CAP;
use ope_core::trajectory::Trajectory;

fn tabular_sgd(t_max: usize) -> DiceConfig {
    let mut cfg = last_turn_config(t_max);
    cfg.lr = 0.5;
    cfg.warmup = 1;
    cfg.steps = 6000;
    cfg.batch_size = usize::MAX;
    cfg
}

#[test]
fn tabular_training_recovers_value_and_satisfies_the_constraint() {
    for seed in [0, 1] {
        let inst = instance(seed);
        let data = enumerated_data(&inst);
        let cfg = tabular_sgd(inst.mdp.t_max);
        let out = run_enigma_on(data, None, &cfg).unwrap();
        let rho = true_policy_value(&inst.mdp, &inst.target, CAP).unwrap();
        assert!((out.estimate - rho).abs() < 0.02, "seed {seed}: {} vs {rho}", out.estimate);
        assert!((out.mean_zeta - 1.0).abs() < 0.02, "seed {seed}: mean ζ {}", out.mean_zeta);
        assert!(!out.coverage.flagged);
        let last = out.curve.last().unwrap();
        assert_eq!(last.step, cfg.steps);
        assert_eq!(last.estimate, Some(out.estimate));
    }
}

#[test]
fn training_is_reproducible_under_a_seed() {
    let inst = instance(2);
    let mut rng = rng_for(2, "episodes", 0);
    let exp: Vec<Trajectory> = (0..200)
        .map(|_| inst.mdp.sample_episode(&inst.behavior, &mut rng).to_trajectory("b"))
        .collect();
    let mut cfg = tabular_sgd(inst.mdp.t_max);
    cfg.steps = 300;
    cfg.batch_size = 16;
    cfg.resample_target_actions = true;
    let target = inst.target.on(&inst.mdp);
    let a = run_enigma(&exp, &target, &cfg).unwrap();
    let b = run_enigma(&exp, &target, &cfg).unwrap();
    assert_eq!(a, b);
    cfg.seed = 9;
    assert_ne!(run_enigma(&exp, &target, &cfg).unwrap().curve, a.curve);
}

#[test]
fn dense_critics_train_to_finite_estimates() {
    let inst = instance(3);
    let data = enumerated_data(&inst);
    for (model, optimizer) in [
        (ModelConfig::Linear, OptimizerKind::Sgd),
        (ModelConfig::Mlp { hidden: vec![16, 16] }, OptimizerKind::Adam),
        (ModelConfig::Shared { width: 16, pretrain: None }, OptimizerKind::Adam),
    ] {
        let mut cfg = DiceConfig::new(inst.mdp.t_max);
        cfg.model = model.clone();
        cfg.optimizer = optimizer;
        cfg.lr = 1e-3;
        cfg.steps = 200;
        cfg.batch_size = 32;
        let out = run_enigma_on(data.clone(), None, &cfg).unwrap();
        assert!(out.estimate.is_finite() && out.mean_zeta >= 0.0, "{model:?}");
        assert!(out.curve.iter().all(|p| p.loss.is_finite()), "{model:?}");
    }
}

#[test]
fn resampling_without_a_policy_is_rejected() {
    let inst = instance(4);
    let mut data = enumerated_data(&inst);
    let mut cfg = tabular_sgd(inst.mdp.t_max);
    cfg.resample_target_actions = true;
    assert!(train(&mut data, None, &cfg).is_err());
}

#[test]
fn horizon_mismatch_is_rejected() {
    let inst = instance(5);
    let data = enumerated_data(&inst);
    let cfg = tabular_sgd(inst.mdp.t_max + 1);
    assert!(run_enigma_on(data, None, &cfg).is_err());
}
