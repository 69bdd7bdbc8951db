//! Episode data model: turns, trajectories, state-action pairs and padding.
//!
//! A trajectory alternates environment and agent turns, `e_0, a_1, e_1, ...,
//! a_T`, and carries one terminal reward. The state at turn `t` is the prefix
//! `e_0 .. e_{t-1}` (including the agent turns in between) and the action is
//! `a_t`. Padding extends every trajectory to a fixed horizon with pseudo
//! states `Pad_{T+1} .. Pad_{T_max}` that always take the `NextPad` action.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{OpeError, Result};

/// Token ids are small integers; environments own their meaning.
pub type Token = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Speaker {
    #[serde(rename = "env")]
    Environment,
    #[serde(rename = "agent")]
    Agent,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub tokens: Vec<Token>,
}

impl Turn {
    pub fn env(tokens: Vec<Token>) -> Self {
        Turn {
            speaker: Speaker::Environment,
            tokens,
        }
    }

    pub fn agent(tokens: Vec<Token>) -> Self {
        Turn {
            speaker: Speaker::Agent,
            tokens,
        }
    }
}

/// One finished episode with a single terminal reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub agent_id: String,
    pub turns: Vec<Turn>,
    pub reward: f64,
}

impl Trajectory {
    /// Builds a trajectory and checks its invariants.
    pub fn new(agent_id: impl Into<String>, turns: Vec<Turn>, reward: f64) -> Result<Self> {
        let traj = Trajectory {
            agent_id: agent_id.into(),
            turns,
            reward,
        };
        traj.validate()?;
        Ok(traj)
    }

    pub fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(OpeError::InvalidTrajectory("no turns".into()));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 {
                Speaker::Environment
            } else {
                Speaker::Agent
            };
            if turn.speaker != expected {
                return Err(OpeError::InvalidTrajectory(format!(
                    "turn {i} has speaker {:?}, expected {expected:?}",
                    turn.speaker
                )));
            }
            if turn.tokens.is_empty() {
                return Err(OpeError::InvalidTrajectory(format!("turn {i} is empty")));
            }
        }
        if !self.turns.len().is_multiple_of(2) {
            return Err(OpeError::InvalidTrajectory(
                "episode must end on an agent turn".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.reward) {
            return Err(OpeError::InvalidTrajectory(format!(
                "reward {} outside [0, 1]",
                self.reward
            )));
        }
        Ok(())
    }

    /// Number of agent turns `T`.
    pub fn len(&self) -> usize {
        self.turns.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// The state `s_t`: turns `e_0, a_1, ..., e_{t-1}` for `t` in `1..=T`.
    pub fn prefix(&self, t: usize) -> &[Turn] {
        &self.turns[..2 * t - 1]
    }

    /// The agent turn `a_t`, `t` in `1..=T`.
    pub fn action(&self, t: usize) -> &Turn {
        &self.turns[2 * t - 1]
    }

    pub fn pair(&self, t: usize) -> StateActionPair {
        StateActionPair::real(self.prefix(t).to_vec(), self.action(t).tokens.clone(), t)
    }

    /// The pair `(s_t, a)` with the logged action replaced.
    pub fn substituted_pair(&self, t: usize, action: Vec<Token>) -> StateActionPair {
        StateActionPair::real(self.prefix(t).to_vec(), action, t)
    }

    /// Canonical whitespace-free JSON, one line.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trajectory serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PairState {
    Prefix(Vec<Turn>),
    /// `Pad_k`, `k` in `1..=T_max`.
    Pad(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PairAction {
    Turn(Vec<Token>),
    NextPad,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StateActionPair {
    pub state: PairState,
    pub action: PairAction,
    pub turn_index: usize,
}

const NS_REAL: u8 = 0x00;
const NS_PAD: u8 = 0x01;
const ACT_TURN: u8 = 0x02;
const ACT_NEXT_PAD: u8 = 0x03;

impl StateActionPair {
    pub fn real(prefix: Vec<Turn>, action: Vec<Token>, turn_index: usize) -> Self {
        StateActionPair {
            state: PairState::Prefix(prefix),
            action: PairAction::Turn(action),
            turn_index,
        }
    }

    pub fn pad(k: usize) -> Self {
        StateActionPair {
            state: PairState::Pad(k),
            action: PairAction::NextPad,
            turn_index: k,
        }
    }

    pub fn is_pad(&self) -> bool {
        matches!(self.state, PairState::Pad(_))
    }

    pub fn prefix(&self) -> Option<&[Turn]> {
        match &self.state {
            PairState::Prefix(p) => Some(p),
            PairState::Pad(_) => None,
        }
    }

    pub fn action_tokens(&self) -> Option<&[Token]> {
        match &self.action {
            PairAction::Turn(t) => Some(t),
            PairAction::NextPad => None,
        }
    }

    /// Length-prefixed byte encoding. Pads live in their own namespace byte,
    /// so they can never collide with token-encoded states.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32);
        match &self.state {
            PairState::Prefix(turns) => {
                out.push(NS_REAL);
                out.extend_from_slice(&(self.turn_index as u32).to_le_bytes());
                out.extend_from_slice(&(turns.len() as u32).to_le_bytes());
                for turn in turns {
                    out.push(match turn.speaker {
                        Speaker::Environment => 0,
                        Speaker::Agent => 1,
                    });
                    push_tokens(&mut out, &turn.tokens);
                }
            }
            PairState::Pad(k) => {
                out.push(NS_PAD);
                out.extend_from_slice(&(*k as u32).to_le_bytes());
            }
        }
        match &self.action {
            PairAction::Turn(tokens) => {
                out.push(ACT_TURN);
                push_tokens(&mut out, tokens);
            }
            PairAction::NextPad => out.push(ACT_NEXT_PAD),
        }
        out
    }
}

fn push_tokens(out: &mut Vec<u8>, tokens: &[Token]) {
    out.extend_from_slice(&(tokens.len() as u32).to_le_bytes());
    for tok in tokens {
        out.extend_from_slice(&tok.to_le_bytes());
    }
}

/// A trajectory extended to exactly `t_max` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedTrajectory {
    /// `pairs[t - 1]` is the pair at turn `t`.
    pub pairs: Vec<StateActionPair>,
    pub reward: f64,
    pub original_length: usize,
}

impl PaddedTrajectory {
    pub fn t_max(&self) -> usize {
        self.pairs.len()
    }

    /// Pair at turn `t` in `1..=t_max`.
    pub fn pair(&self, t: usize) -> &StateActionPair {
        &self.pairs[t - 1]
    }

    pub fn terminal_pair(&self) -> &StateActionPair {
        self.pair(self.original_length)
    }
}

pub fn pad_trajectory(h: &Trajectory, t_max: usize) -> Result<PaddedTrajectory> {
    let length = h.len();
    if length > t_max {
        return Err(OpeError::LengthExceedsHorizon { length, t_max });
    }
    let mut pairs: Vec<StateActionPair> = (1..=length).map(|t| h.pair(t)).collect();
    pairs.extend((length + 1..=t_max).map(StateActionPair::pad));
    Ok(PaddedTrajectory {
        pairs,
        reward: h.reward,
        original_length: length,
    })
}

/// Reads the JSON-lines experience format, validating every record.
pub fn read_experience<R: BufRead>(reader: R) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let traj: Trajectory = serde_json::from_str(&line)?;
        traj.validate().map_err(|e| {
            OpeError::InvalidTrajectory(format!("line {}: {e}", lineno + 1))
        })?;
        out.push(traj);
    }
    Ok(out)
}

pub fn write_experience<W: Write>(mut writer: W, experience: &[Trajectory]) -> Result<()> {
    for traj in experience {
        writeln!(writer, "{}", traj.to_json_line())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dialog(t: usize, reward: f64) -> Trajectory {
        let mut turns = Vec::new();
        for i in 0..t {
            turns.push(Turn::env(vec![10 + i as Token]));
            turns.push(Turn::agent(vec![20 + i as Token, 1]));
        }
        Trajectory::new("a", turns, reward).unwrap()
    }

    #[test]
    fn pad_full_length_has_no_pads() {
        let p = pad_trajectory(&dialog(4, 0.5), 4).unwrap();
        assert_eq!(p.pairs.len(), 4);
        assert!(p.pairs.iter().all(|x| !x.is_pad()));
    }

    #[test]
    fn pad_short_dialog() {
        let h = dialog(2, 1.0);
        let p = pad_trajectory(&h, 4).unwrap();
        assert_eq!(p.original_length, 2);
        assert_eq!(p.pair(1), &h.pair(1));
        assert_eq!(p.pair(2), &h.pair(2));
        assert_eq!(p.pair(3), &StateActionPair::pad(3));
        assert_eq!(p.pair(4), &StateActionPair::pad(4));
        assert_eq!(p.reward, 1.0);
    }

    #[test]
    fn pad_too_long_is_error() {
        assert!(matches!(
            pad_trajectory(&dialog(5, 0.0), 4),
            Err(OpeError::LengthExceedsHorizon { length: 5, t_max: 4 })
        ));
    }

    #[test]
    fn rejects_environment_terminated_dialog() {
        let turns = vec![
            Turn::env(vec![1]),
            Turn::agent(vec![2]),
            Turn::env(vec![3]),
        ];
        assert!(Trajectory::new("x", turns, 0.0).is_err());
    }

    #[test]
    fn rejects_bad_reward_and_empty_turn() {
        let turns = vec![Turn::env(vec![1]), Turn::agent(vec![2])];
        assert!(Trajectory::new("x", turns.clone(), 1.5).is_err());
        let turns = vec![Turn::env(vec![]), Turn::agent(vec![2])];
        assert!(Trajectory::new("x", turns, 0.5).is_err());
    }

    #[test]
    fn json_line_is_canonical() {
        let h = Trajectory::new(
            "bot-1",
            vec![Turn::env(vec![1, 2]), Turn::agent(vec![3])],
            0.25,
        )
        .unwrap();
        assert_eq!(
            h.to_json_line(),
            r#"{"agent_id":"bot-1","turns":[{"speaker":"env","tokens":[1,2]},{"speaker":"agent","tokens":[3]}],"reward":0.25}"#
        );
        let back = read_experience(h.to_json_line().as_bytes()).unwrap();
        assert_eq!(back, vec![h]);
    }

    #[test]
    fn pad_and_real_keys_differ() {
        // A real pair whose raw numbers mimic a pad's index still gets a distinct key.
        let real = StateActionPair::real(vec![Turn::env(vec![3])], vec![3], 3);
        assert_ne!(real.canonical_bytes(), StateActionPair::pad(3).canonical_bytes());
    }
}
