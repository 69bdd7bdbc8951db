//! A booking dialog: the customer has a hidden flight goal and drops noisy
//! hints; the agent asks for more hints or commits to a booking.

use std::collections::BTreeMap;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{OpeError, Result};
use crate::policy::{sample_index, uniform, Policy};
use crate::seed::rng_for;
use crate::trajectory::{Token, Trajectory, Turn};

pub const GREET: Token = 0;
pub const ASK: Token = 1;
pub const BOOK: Token = 2;

pub const CORRECT_REWARD: f64 = 1.0;
pub const WRONG_REWARD: f64 = 0.25;
pub const TIMEOUT_REWARD: f64 = 0.0;

fn d_goals() -> usize {
    4
}
fn d_hint_noise() -> f64 {
    0.2
}
fn d_t_max() -> usize {
    8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TicketToyEnv {
    #[serde(default = "d_goals")]
    pub n_goals: usize,
    /// Probability that a hint names a goal other than the true one.
    #[serde(default = "d_hint_noise")]
    pub hint_noise: f64,
    /// Padding horizon; dialogs end after at most `t_max - 1` agent turns.
    #[serde(default = "d_t_max")]
    pub t_max: usize,
}

impl Default for TicketToyEnv {
    fn default() -> Self {
        TicketToyEnv {
            n_goals: d_goals(),
            hint_noise: d_hint_noise(),
            t_max: d_t_max(),
        }
    }
}

impl TicketToyEnv {
    pub fn validate(&self) -> Result<()> {
        if self.n_goals < 2 {
            return Err(OpeError::Config("n_goals must be at least 2".into()));
        }
        if !(0.0..=0.5).contains(&self.hint_noise) {
            return Err(OpeError::Config("hint_noise must lie in [0, 0.5]".into()));
        }
        if self.t_max < 2 {
            return Err(OpeError::Config("t_max must be at least 2".into()));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        3 + 2 * self.n_goals
    }

    pub fn max_turns(&self) -> usize {
        self.t_max - 1
    }

    pub fn hint(&self, goal: usize) -> Token {
        (3 + goal) as Token
    }

    pub fn flight(&self, goal: usize) -> Token {
        (3 + self.n_goals + goal) as Token
    }

    fn hint_goal(&self, tok: Token) -> Option<usize> {
        let t = tok as usize;
        (3..3 + self.n_goals).contains(&t).then(|| t - 3)
    }

    fn flight_goal(&self, tok: Token) -> Option<usize> {
        let t = tok as usize;
        (3 + self.n_goals..3 + 2 * self.n_goals).contains(&t).then(|| t - 3 - self.n_goals)
    }

    /// Distribution of the goal named by one hint.
    fn hint_probs(&self, goal: usize) -> Vec<f64> {
        let other = self.hint_noise / (self.n_goals - 1) as f64;
        (0..self.n_goals)
            .map(|h| if h == goal { 1.0 - self.hint_noise } else { other })
            .collect()
    }

    fn sample_hint(&self, goal: usize, rng: &mut dyn RngCore) -> Turn {
        Turn::env(vec![self.hint(sample_index(&self.hint_probs(goal), rng))])
    }

    fn reward(&self, goal: usize, booked: usize) -> f64 {
        if goal == booked {
            CORRECT_REWARD
        } else {
            WRONG_REWARD
        }
    }

    /// Hint counts per goal observed in a prefix, and the number of agent turns.
    fn parse(&self, prefix: &[Turn]) -> Result<(Vec<usize>, usize)> {
        let mut counts = vec![0usize; self.n_goals];
        let mut asks = 0;
        for turn in prefix {
            match turn.speaker {
                crate::trajectory::Speaker::Environment => {
                    for &tok in &turn.tokens {
                        if let Some(g) = self.hint_goal(tok) {
                            counts[g] += 1;
                        } else if tok != GREET {
                            return Err(OpeError::PolicyUndefined(format!("unexpected env token {tok}")));
                        }
                    }
                }
                crate::trajectory::Speaker::Agent => {
                    if turn.tokens != [ASK] {
                        return Err(OpeError::PolicyUndefined("dialog continues after a booking".into()));
                    }
                    asks += 1;
                }
            }
        }
        if counts.iter().sum::<usize>() == 0 {
            return Err(OpeError::PolicyUndefined("prefix has no hint".into()));
        }
        Ok((counts, asks))
    }

    /// Plays one dialog with `agent`.
    pub fn episode(&self, agent: &dyn Policy, agent_id: &str, rng: &mut dyn RngCore) -> Result<Trajectory> {
        let goal = sample_index(&vec![1.0 / self.n_goals as f64; self.n_goals], rng);
        let first = self.sample_hint(goal, rng);
        let mut turns = vec![Turn::env(vec![GREET, first.tokens[0]])];
        for t in 1..=self.max_turns() {
            let action = agent.sample(&turns, rng)?;
            let booked = match action.as_slice() {
                [ASK] => None,
                [BOOK, f] => Some(
                    self.flight_goal(*f)
                        .ok_or_else(|| OpeError::InvalidTrajectory(format!("unknown flight token {f}")))?,
                ),
                other => return Err(OpeError::InvalidTrajectory(format!("unknown agent turn {other:?}"))),
            };
            turns.push(Turn::agent(action));
            if let Some(k) = booked {
                return Trajectory::new(agent_id, turns, self.reward(goal, k));
            }
            if t == self.max_turns() {
                return Trajectory::new(agent_id, turns, TIMEOUT_REWARD);
            }
            turns.push(self.sample_hint(goal, rng));
        }
        unreachable!("loop returns by the last turn")
    }

    /// Exact expected reward of `agent`, by dynamic programming over hint counts.
    pub fn exact_value(&self, agent: &TicketAgent) -> Result<f64> {
        self.validate()?;
        let mut total = 0.0;
        for goal in 0..self.n_goals {
            let hp = self.hint_probs(goal);
            // Distribution over hint-count vectors at the current turn.
            let mut layer: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
            for (h, p) in hp.iter().enumerate() {
                let mut c = vec![0; self.n_goals];
                c[h] = 1;
                *layer.entry(c).or_default() += p;
            }
            for t in 1..=self.max_turns() {
                let mut next: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
                for (counts, p) in &layer {
                    let dist = agent.decision(counts, t - 1);
                    for (k, q) in dist.book.iter().enumerate() {
                        total += p * q * self.reward(goal, k) / self.n_goals as f64;
                    }
                    if dist.ask > 0.0 && t < self.max_turns() {
                        for (h, ph) in hp.iter().enumerate() {
                            let mut c = counts.clone();
                            c[h] += 1;
                            *next.entry(c).or_default() += p * dist.ask * ph;
                        }
                    }
                }
                layer = next;
            }
        }
        Ok(total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub agent_id: String,
    /// Probability of reading a hint as a uniformly chosen wrong goal.
    pub read_noise: f64,
    /// Number of asks after which the agent books its best guess.
    pub patience: usize,
    pub seed: u64,
}

/// Action probabilities of a ticket agent at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub ask: f64,
    pub book: Vec<f64>,
}

/// Rule-based agent: re-reads every hint (with read noise) each turn, books
/// once the leading goal is two counts ahead or patience runs out, and asks
/// otherwise. The policy depends only on the hint multiset and turn.
#[derive(Debug, Clone, PartialEq)]
pub struct TicketAgent {
    pub env: TicketToyEnv,
    pub spec: AgentSpec,
}

const MARGIN: usize = 2;

impl TicketAgent {
    pub fn new(env: TicketToyEnv, spec: AgentSpec) -> Result<Self> {
        if !(0.0..=1.0).contains(&spec.read_noise) {
            return Err(OpeError::Config(format!("read_noise {} outside [0, 1]", spec.read_noise)));
        }
        Ok(TicketAgent { env, spec })
    }

    /// Action given the counts the agent read.
    fn choose(&self, read: &[usize], asks: usize) -> Decision {
        let n = read.len();
        let top = *read.iter().max().expect("goals");
        let leaders: Vec<usize> = (0..n).filter(|&g| read[g] == top).collect();
        let second = if leaders.len() > 1 {
            top
        } else {
            (0..n).filter(|&g| read[g] != top).map(|g| read[g]).max().unwrap_or(0)
        };
        let mut book = vec![0.0; n];
        if asks >= self.spec.patience || top - second >= MARGIN {
            for &g in &leaders {
                book[g] = 1.0 / leaders.len() as f64;
            }
            Decision { ask: 0.0, book }
        } else {
            Decision { ask: 1.0, book }
        }
    }

    /// Exact action distribution given true hint counts.
    pub fn decision(&self, counts: &[usize], asks: usize) -> Decision {
        let n = counts.len();
        let q = self.spec.read_noise;
        let other = if n > 1 { q / (n - 1) as f64 } else { 0.0 };
        let mut reads: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
        reads.insert(vec![0; n], 1.0);
        for (h, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                let mut next: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
                for (r, p) in &reads {
                    for g in 0..n {
                        let pg = if g == h { 1.0 - q } else { other };
                        if pg == 0.0 {
                            continue;
                        }
                        let mut r2 = r.clone();
                        r2[g] += 1;
                        *next.entry(r2).or_default() += p * pg;
                    }
                }
                reads = next;
            }
        }
        let mut out = Decision {
            ask: 0.0,
            book: vec![0.0; n],
        };
        for (r, p) in &reads {
            let d = self.choose(r, asks);
            out.ask += p * d.ask;
            for g in 0..n {
                out.book[g] += p * d.book[g];
            }
        }
        out
    }

    fn book_turn(&self, g: usize) -> Vec<Token> {
        vec![BOOK, self.env.flight(g)]
    }
}

impl Policy for TicketAgent {
    fn sample(&self, prefix: &[Turn], rng: &mut dyn RngCore) -> Result<Vec<Token>> {
        let (counts, asks) = self.env.parse(prefix)?;
        let n = counts.len();
        let q = self.spec.read_noise;
        let mut read = vec![0usize; n];
        for (h, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                let g = if uniform(rng) < q {
                    let k = (uniform(rng) * (n - 1) as f64) as usize;
                    let k = k.min(n - 2);
                    if k >= h {
                        k + 1
                    } else {
                        k
                    }
                } else {
                    h
                };
                read[g] += 1;
            }
        }
        let d = self.choose(&read, asks);
        if d.ask > 0.0 {
            return Ok(vec![ASK]);
        }
        Ok(self.book_turn(sample_index(&d.book, rng)))
    }

    fn distribution(&self, prefix: &[Turn]) -> Option<Result<Vec<(Vec<Token>, f64)>>> {
        Some(self.env.parse(prefix).map(|(counts, asks)| {
            let d = self.decision(&counts, asks);
            let mut out = Vec::new();
            if d.ask > 0.0 {
                out.push((vec![ASK], d.ask));
            }
            for (g, &p) in d.book.iter().enumerate() {
                if p > 0.0 {
                    out.push((self.book_turn(g), p));
                }
            }
            out
        }))
    }
}

/// `n_episodes` dialogs of `agent`, reproducible under `seed`.
pub fn rollout(env: &TicketToyEnv, agent: &TicketAgent, n_episodes: usize, seed: u64) -> Result<Vec<Trajectory>> {
    env.validate()?;
    let mut rng = rng_for(seed, "rollout", agent.spec.seed);
    (0..n_episodes)
        .map(|_| env.episode(agent, &agent.spec.agent_id, &mut rng))
        .collect()
}

/// Monte-Carlo value of an agent.
pub fn monte_carlo_value(env: &TicketToyEnv, agent: &TicketAgent, n_episodes: usize, seed: u64) -> Result<f64> {
    let eps = rollout(env, agent, n_episodes, seed)?;
    Ok(eps.iter().map(|h| h.reward).sum::<f64>() / n_episodes as f64)
}

/// Twelve agents of graded quality.
pub fn default_family() -> Vec<AgentSpec> {
    let grid: [(f64, usize); 12] = [
        (0.0, 6),
        (0.05, 4),
        (0.1, 6),
        (0.15, 3),
        (0.2, 5),
        (0.3, 2),
        (0.35, 4),
        (0.45, 1),
        (0.55, 3),
        (0.65, 2),
        (0.8, 1),
        (0.9, 6),
    ];
    grid.iter()
        .enumerate()
        .map(|(i, &(read_noise, patience))| AgentSpec {
            agent_id: format!("agent-{i:02}"),
            read_noise,
            patience,
            seed: i as u64,
        })
        .collect()
}
