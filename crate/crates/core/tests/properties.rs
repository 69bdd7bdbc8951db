//! Property-based checks of structural invariants.

use ope_core::approx::{Activation, Approximator, FeatureMap};
use ope_core::dice::{normalized_ratio, DiceConfig};
use ope_core::envs::random_mdp::{generate_random_mdp, random_policy, RandomMdpSpec};
use ope_core::envs::ticket::{AgentSpec, TicketAgent, TicketToyEnv, ASK, GREET};
use ope_core::oracle::stationary_by_formula;
use ope_core::policy::Policy;
use ope_core::tabular::DEFAULT_ENUMERATION_CAP as CAP;
use ope_core::trajectory::{pad_trajectory, read_experience, write_experience, PairAction, Trajectory, Turn};
use proptest::prelude::*;

fn trajectory() -> impl Strategy<Value = Trajectory> {
    (1usize..6, prop::collection::vec(prop::collection::vec(0u32..20, 1..4), 12), 0.0f64..1.0).prop_map(
        |(len, toks, r)| {
            let turns = (0..2 * len)
                .map(|i| {
                    if i % 2 == 0 {
                        Turn::env(toks[i].clone())
                    } else {
                        Turn::agent(toks[i].clone())
                    }
                })
                .collect();
            Trajectory::new("p", turns, r).unwrap()
        },
    )
}

proptest! {
    #[test]
    fn padding_fills_the_horizon(h in trajectory(), extra in 0usize..4) {
        let t_max = h.len() + extra;
        let p = pad_trajectory(&h, t_max).unwrap();
        prop_assert_eq!(p.t_max(), t_max);
        prop_assert_eq!(p.original_length, h.len());
        for t in 1..=t_max {
            prop_assert_eq!(p.pair(t).is_pad(), t > h.len());
            prop_assert_eq!(p.pair(t).turn_index, t);
        }
        prop_assert_eq!(p.terminal_pair().action_tokens().unwrap(), h.turns[2 * h.len() - 1].tokens.as_slice());
        if h.len() > 1 {
            prop_assert!(pad_trajectory(&h, h.len() - 1).is_err());
        }
    }

    #[test]
    fn experience_round_trips(hs in prop::collection::vec(trajectory(), 1..5)) {
        let mut buf = Vec::new();
        write_experience(&mut buf, &hs).unwrap();
        prop_assert_eq!(read_experience(buf.as_slice()).unwrap(), hs);
    }

    #[test]
    fn square_activation_is_nonnegative(h in trajectory(), seed in 0u64..1000, shift in -3.0f64..3.0) {
        let map = FeatureMap::new(20, 6);
        for mut a in [
            Approximator::linear(map, Activation::Square, 1.0),
            Approximator::mlp(map, &[8], Activation::Square, seed, 1.0),
        ] {
            a.params_mut().iter_mut().enumerate().for_each(|(i, p)| *p += shift * ((i % 7) as f64 - 3.0));
            for t in 1..=h.len() {
                prop_assert!(a.evaluate(&h.pair(t)).unwrap() >= 0.0);
            }
        }
    }

    #[test]
    fn post_normalization_is_scale_invariant(
        rows in prop::collection::vec((0.01f64..5.0, 0.0f64..1.0, 0.1f64..2.0), 1..20),
        c in 1e-3f64..1e3,
    ) {
        let z: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let r: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let w: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let scaled: Vec<f64> = z.iter().map(|v| v * c).collect();
        let a = normalized_ratio(&z, &r, &w).unwrap();
        let b = normalized_ratio(&scaled, &r, &w).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&a));
    }

    #[test]
    fn stationary_distribution_sums_to_one(
        n_states in 1usize..8, n_actions in 1usize..4, max_len in 1usize..5, seed in 0u64..500,
    ) {
        let spec = RandomMdpSpec {
            n_states: n_states.max(max_len), n_actions, branching: 2, min_len: 1, max_len,
            sparse_rewards: seed % 2 == 0, t_max: None, seed,
        };
        let mdp = generate_random_mdp(&spec).unwrap();
        let pol = random_policy(mdp.n_states, n_actions, seed);
        let d = stationary_by_formula(&mdp, &pol, CAP).unwrap();
        prop_assert!((d.total() - 1.0).abs() < 1e-10);
        prop_assert!((d.last_pad_weight() - 1.0 / mdp.t_max as f64).abs() < 1e-10);
    }

    #[test]
    fn ticket_agent_distribution_is_normalized(
        read_noise in 0.0f64..1.0, patience in 0usize..8, hints in prop::collection::vec(0usize..4, 1..7),
    ) {
        let env = TicketToyEnv::default();
        let agent = TicketAgent::new(env, AgentSpec {
            agent_id: "p".into(), read_noise, patience, seed: 0,
        }).unwrap();
        let mut prefix = vec![Turn::env(vec![GREET, env.hint(hints[0])])];
        for &h in &hints[1..] {
            prefix.push(Turn::agent(vec![ASK]));
            prefix.push(Turn::env(vec![env.hint(h)]));
        }
        let dist = agent.distribution(&prefix).unwrap().unwrap();
        let total: f64 = dist.iter().map(|(_, p)| p).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(dist.iter().all(|(_, p)| *p > 0.0));
    }

    #[test]
    fn dice_config_json_round_trips(lr in 1e-6f64..1.0, steps in 1u64..100_000, t_max in 1usize..20) {
        let mut cfg = DiceConfig::new(t_max);
        cfg.lr = lr;
        cfg.steps = steps;
        let back: DiceConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back, cfg);
    }
}

#[test]
fn pad_pairs_carry_no_action() {
    let h = Trajectory::new("p", vec![Turn::env(vec![1]), Turn::agent(vec![2])], 1.0).unwrap();
    let p = pad_trajectory(&h, 3).unwrap();
    assert!(matches!(p.pair(2).action, PairAction::NextPad));
}
