//! Explicit finite MDPs, tabular policies, exact enumeration and the
//! padded infinite-horizon augmentation.
//!
//! A tabular MDP is exposed to the dialog machinery by encoding state `s` as
//! the environment turn `[s]` and action `a` as the agent turn `[a]`.

use std::collections::BTreeSet;
use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{OpeError, Result};
use crate::policy::{sample_index, Policy};
use crate::trajectory::{Token, Trajectory, Turn};

const PROB_TOL: f64 = 1e-12;

/// Default cap on enumerated trajectories.
pub const DEFAULT_ENUMERATION_CAP: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub mu0: Vec<f64>,
    /// `kernel[s * n_actions + a]` is the next-state distribution.
    pub kernel: Vec<Vec<f64>>,
    pub terminal_reward: Vec<f64>,
    pub terminal_flag: Vec<bool>,
    pub t_max: usize,
}

fn check_distribution(what: &str, p: &[f64], len: usize) -> Result<()> {
    if p.len() != len {
        return Err(OpeError::InvalidMdp(format!(
            "{what} has length {}, expected {len}",
            p.len()
        )));
    }
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(OpeError::InvalidMdp(format!("{what} has a negative or non-finite entry")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(OpeError::InvalidMdp(format!("{what} sums to {sum}")));
    }
    Ok(())
}

impl TabularMdp {
    #[inline]
    pub fn sa(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    pub fn is_terminal(&self, s: usize, a: usize) -> bool {
        self.terminal_flag[self.sa(s, a)]
    }

    /// Reward of `(s, a)`: the terminal reward if the pair ends the episode, else 0.
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        let i = self.sa(s, a);
        if self.terminal_flag[i] {
            self.terminal_reward[i]
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_actions == 0 || self.t_max == 0 {
            return Err(OpeError::InvalidMdp("empty state/action space or zero horizon".into()));
        }
        let n_sa = self.n_states * self.n_actions;
        check_distribution("mu0", &self.mu0, self.n_states)?;
        if self.kernel.len() != n_sa
            || self.terminal_reward.len() != n_sa
            || self.terminal_flag.len() != n_sa
        {
            return Err(OpeError::InvalidMdp("table sizes do not match n_states * n_actions".into()));
        }
        for (i, row) in self.kernel.iter().enumerate() {
            check_distribution(&format!("kernel row {i}"), row, self.n_states)?;
        }
        if self
            .terminal_reward
            .iter()
            .any(|r| !(0.0..=1.0).contains(r))
        {
            return Err(OpeError::InvalidMdp("terminal reward outside [0, 1]".into()));
        }
        // Reachability: at turn t_max every action from every reachable state must terminate.
        let mut reachable: BTreeSet<usize> = (0..self.n_states).filter(|&s| self.mu0[s] > 0.0).collect();
        for t in 1..=self.t_max {
            let mut next = BTreeSet::new();
            for &s in &reachable {
                for a in 0..self.n_actions {
                    if self.is_terminal(s, a) {
                        continue;
                    }
                    if t == self.t_max {
                        return Err(OpeError::InvalidMdp(format!(
                            "state {s} action {a} is non-terminal at turn t_max = {}",
                            self.t_max
                        )));
                    }
                    for (s2, &p) in self.kernel[self.sa(s, a)].iter().enumerate() {
                        if p > 0.0 {
                            next.insert(s2);
                        }
                    }
                }
            }
            reachable = next;
        }
        Ok(())
    }

    pub fn state_turn(s: usize) -> Turn {
        Turn::env(vec![s as Token])
    }

    pub fn action_turn(a: usize) -> Turn {
        Turn::agent(vec![a as Token])
    }

    /// Decodes the MDP state from the last environment turn of a prefix.
    pub fn decode_state(&self, prefix: &[Turn]) -> Result<usize> {
        let last = prefix
            .last()
            .ok_or_else(|| OpeError::PolicyUndefined("empty prefix".into()))?;
        match last.tokens.as_slice() {
            [s] if (*s as usize) < self.n_states => Ok(*s as usize),
            other => Err(OpeError::PolicyUndefined(format!(
                "turn {other:?} is not a state of this MDP"
            ))),
        }
    }

    pub fn decode_action(&self, tokens: &[Token]) -> Result<usize> {
        match tokens {
            [a] if (*a as usize) < self.n_actions => Ok(*a as usize),
            other => Err(OpeError::PolicyUndefined(format!(
                "turn {other:?} is not an action of this MDP"
            ))),
        }
    }

    pub fn sample_episode(&self, policy: &TabularPolicy, rng: &mut dyn RngCore) -> MdpEpisode {
        let mut states = Vec::new();
        let mut actions = Vec::new();
        let mut s = sample_index(&self.mu0, rng);
        loop {
            let a = sample_index(&policy.probs[s], rng);
            states.push(s);
            actions.push(a);
            if self.is_terminal(s, a) || states.len() >= self.t_max {
                let reward = self.reward(s, a);
                return MdpEpisode {
                    states,
                    actions,
                    reward,
                };
            }
            s = sample_index(&self.kernel[self.sa(s, a)], rng);
        }
    }
}

/// A state-indexed stochastic policy for a [`TabularMdp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub probs: Vec<Vec<f64>>,
}

impl TabularPolicy {
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self> {
        for (s, row) in probs.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > PROB_TOL {
                return Err(OpeError::InvalidPolicy(format!("row {s} is not a distribution")));
            }
        }
        Ok(TabularPolicy { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        TabularPolicy {
            probs: vec![vec![1.0 / n_actions as f64; n_actions]; n_states],
        }
    }

    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let probs = actions
            .iter()
            .map(|&a| {
                let mut row = vec![0.0; n_actions];
                row[a] = 1.0;
                row
            })
            .collect();
        TabularPolicy { probs }
    }

    /// `sum_k w_k * pi_k`, with weights summing to 1.
    pub fn mixture(components: &[(f64, &TabularPolicy)]) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| OpeError::Empty("mixture components".into()))?
            .1;
        let mut probs = vec![vec![0.0; first.probs[0].len()]; first.probs.len()];
        for (w, pol) in components {
            for (row, prow) in probs.iter_mut().zip(&pol.probs) {
                for (x, p) in row.iter_mut().zip(prow) {
                    *x += w * p;
                }
            }
        }
        for row in &mut probs {
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= sum);
        }
        TabularPolicy::new(probs)
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s][a]
    }

    /// Binds the policy to an MDP so it can act on token prefixes.
    pub fn on<'a>(&'a self, mdp: &'a TabularMdp) -> MdpAgent<'a> {
        MdpAgent { mdp, policy: self }
    }
}

/// A tabular policy acting on token-encoded dialogs of its MDP.
#[derive(Debug, Clone, Copy)]
pub struct MdpAgent<'a> {
    pub mdp: &'a TabularMdp,
    pub policy: &'a TabularPolicy,
}

impl Policy for MdpAgent<'_> {
    fn sample(&self, prefix: &[Turn], rng: &mut dyn RngCore) -> Result<Vec<Token>> {
        let s = self.mdp.decode_state(prefix)?;
        Ok(vec![sample_index(&self.policy.probs[s], rng) as Token])
    }

    fn distribution(&self, prefix: &[Turn]) -> Option<Result<Vec<(Vec<Token>, f64)>>> {
        Some(self.mdp.decode_state(prefix).map(|s| {
            self.policy.probs[s]
                .iter()
                .enumerate()
                .filter(|(_, &p)| p > 0.0)
                .map(|(a, &p)| (vec![a as Token], p))
                .collect()
        }))
    }
}

/// An episode of a tabular MDP as index sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct MdpEpisode {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub reward: f64,
}

impl MdpEpisode {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn to_trajectory(&self, agent_id: &str) -> Trajectory {
        let turns = self
            .states
            .iter()
            .zip(&self.actions)
            .flat_map(|(&s, &a)| [TabularMdp::state_turn(s), TabularMdp::action_turn(a)])
            .collect();
        Trajectory {
            agent_id: agent_id.to_string(),
            turns,
            reward: self.reward,
        }
    }
}

/// Every trajectory of `mdp` under `policy` with its probability.
pub fn enumerate_trajectories(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    cap: usize,
) -> Result<Vec<(MdpEpisode, f64)>> {
    let mut out = Vec::new();
    let mut states = Vec::new();
    let mut actions = Vec::new();
    for s in 0..mdp.n_states {
        if mdp.mu0[s] > 0.0 {
            walk(mdp, policy, s, mdp.mu0[s], &mut states, &mut actions, &mut out, cap)?;
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn walk(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    s: usize,
    prob: f64,
    states: &mut Vec<usize>,
    actions: &mut Vec<usize>,
    out: &mut Vec<(MdpEpisode, f64)>,
    cap: usize,
) -> Result<()> {
    states.push(s);
    for a in 0..mdp.n_actions {
        let pa = policy.prob(s, a);
        if pa == 0.0 {
            continue;
        }
        actions.push(a);
        let p = prob * pa;
        if mdp.is_terminal(s, a) || states.len() >= mdp.t_max {
            if out.len() >= cap {
                return Err(OpeError::EnumerationCapExceeded { cap });
            }
            out.push((
                MdpEpisode {
                    states: states.clone(),
                    actions: actions.clone(),
                    reward: mdp.reward(s, a),
                },
                p,
            ));
        } else {
            for (s2, &ps) in mdp.kernel[mdp.sa(s, a)].iter().enumerate() {
                if ps > 0.0 {
                    walk(mdp, policy, s2, p * ps, states, actions, out, cap)?;
                }
            }
        }
        actions.pop();
    }
    states.pop();
    Ok(())
}

/// A state-action pair of the augmented chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AugPair {
    Real { turn: usize, state: usize, action: usize },
    /// `(Pad_k, NextPad)`.
    Pad(usize),
}

impl AugPair {
    /// Turn layer in `1..=t_max`.
    pub fn layer(&self) -> usize {
        match *self {
            AugPair::Real { turn, .. } => turn,
            AugPair::Pad(k) => k,
        }
    }
}

impl fmt::Display for AugPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugPair::Real { turn, state, action } => write!(f, "(t={turn}, s={state}, a={action})"),
            AugPair::Pad(k) => write!(f, "(Pad_{k}, NextPad)"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AugState {
    Real { turn: usize, state: usize },
    Pad(usize),
}

/// The padded, infinite-horizon chain built from a terminating MDP.
///
/// Real states carry their turn index so that a terminal pair at turn `T`
/// can jump to `Pad_{T+1}`. A terminal pair at turn `t_max` has no pad to
/// jump into and restarts from `mu0` directly.
#[derive(Debug, Clone)]
pub struct AugmentedMdp {
    pub base: TabularMdp,
    pub t_max: usize,
    /// All pairs, indexed by [`AugmentedMdp::pair_index`].
    pub pairs: Vec<AugPair>,
    /// Next-state distribution of each pair.
    pub next: Vec<Vec<(AugState, f64)>>,
}

pub fn build_augmented_kernel(mdp: &TabularMdp) -> Result<AugmentedMdp> {
    mdp.validate()?;
    let (n, na, t_max) = (mdp.n_states, mdp.n_actions, mdp.t_max);
    let restart: Vec<(AugState, f64)> = (0..n)
        .filter(|&s| mdp.mu0[s] > 0.0)
        .map(|s| (AugState::Real { turn: 1, state: s }, mdp.mu0[s]))
        .collect();
    let mut pairs = Vec::with_capacity(n * na * t_max + t_max);
    let mut next = Vec::with_capacity(pairs.capacity());
    for turn in 1..=t_max {
        for state in 0..n {
            for action in 0..na {
                pairs.push(AugPair::Real { turn, state, action });
                let row = if mdp.is_terminal(state, action) || turn == t_max {
                    if turn < t_max {
                        vec![(AugState::Pad(turn + 1), 1.0)]
                    } else {
                        restart.clone()
                    }
                } else {
                    mdp.kernel[mdp.sa(state, action)]
                        .iter()
                        .enumerate()
                        .filter(|(_, &p)| p > 0.0)
                        .map(|(s2, &p)| (AugState::Real { turn: turn + 1, state: s2 }, p))
                        .collect()
                };
                next.push(row);
            }
        }
    }
    for k in 1..=t_max {
        pairs.push(AugPair::Pad(k));
        next.push(if k < t_max {
            vec![(AugState::Pad(k + 1), 1.0)]
        } else {
            restart.clone()
        });
    }
    let aug = AugmentedMdp {
        base: mdp.clone(),
        t_max,
        pairs,
        next,
    };
    aug.validate()?;
    Ok(aug)
}

impl AugmentedMdp {
    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn pair_index(&self, pair: &AugPair) -> usize {
        let (n, na) = (self.base.n_states, self.base.n_actions);
        match *pair {
            AugPair::Real { turn, state, action } => ((turn - 1) * n + state) * na + action,
            AugPair::Pad(k) => n * na * self.t_max + (k - 1),
        }
    }

    /// Every kernel row is a probability vector.
    pub fn validate(&self) -> Result<()> {
        for (pair, row) in self.pairs.iter().zip(&self.next) {
            let sum: f64 = row.iter().map(|(_, p)| p).sum();
            if (sum - 1.0).abs() > PROB_TOL || row.iter().any(|(_, p)| *p < 0.0) {
                return Err(OpeError::InvalidMdp(format!(
                    "augmented row {pair} sums to {sum}"
                )));
            }
        }
        Ok(())
    }

    /// Pairs reachable from `pair` in one step under `policy`, with probabilities.
    pub fn successors(&self, pair_idx: usize, policy: &TabularPolicy) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        for &(state, p) in &self.next[pair_idx] {
            match state {
                AugState::Pad(k) => out.push((self.pair_index(&AugPair::Pad(k)), p)),
                AugState::Real { turn, state } => {
                    for (action, &pa) in policy.probs[state].iter().enumerate() {
                        if pa > 0.0 {
                            out.push((self.pair_index(&AugPair::Real { turn, state, action }), p * pa));
                        }
                    }
                }
            }
        }
        out
    }

    /// Reward of an augmented pair; pads earn nothing.
    pub fn reward(&self, pair: &AugPair) -> f64 {
        match *pair {
            AugPair::Real { state, action, .. } => self.base.reward(state, action),
            AugPair::Pad(_) => 0.0,
        }
    }
}
