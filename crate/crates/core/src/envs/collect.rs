use serde::{Deserialize, Serialize};

use super::ticket::{rollout, AgentSpec, TicketAgent, TicketToyEnv};
use crate::error::{OpeError, Result};
use crate::policy::Policy;
use crate::seed::{derive_seed, rng_for};
use crate::trajectory::Trajectory;

/// `episodes_per_agent` dialogs of each agent, with an independent stream per agent.
pub fn collect_family(
    env: &TicketToyEnv,
    family: &[AgentSpec],
    episodes_per_agent: usize,
    seed: u64,
) -> Result<Vec<Vec<Trajectory>>> {
    family
        .iter()
        .enumerate()
        .map(|(j, spec)| {
            let agent = TicketAgent::new(*env, spec.clone())?;
            rollout(env, &agent, episodes_per_agent, derive_seed(seed, "collect", j as u64))
        })
        .collect()
}

/// Logged dialogs of every agent except `held_out`, in family order.
pub fn collect_leave_one_out(
    env: &TicketToyEnv,
    family: &[AgentSpec],
    held_out: usize,
    episodes_per_agent: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if family.len() < 2 {
        return Err(OpeError::Config("leave-one-out needs at least 2 agents".into()));
    }
    if held_out >= family.len() {
        return Err(OpeError::Config(format!("held-out index {held_out} outside family of {}", family.len())));
    }
    let mut out = Vec::with_capacity(episodes_per_agent * (family.len() - 1));
    for (j, spec) in family.iter().enumerate() {
        if j == held_out {
            continue;
        }
        let agent = TicketAgent::new(*env, spec.clone())?;
        out.extend(rollout(env, &agent, episodes_per_agent, derive_seed(seed, "collect", j as u64))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChallengingFilter {
    /// Largest token edit distance at which a replayed turn counts as a match.
    #[serde(default)]
    pub max_edit_distance: usize,
}

impl ChallengingFilter {
    /// Drops dialogs in which every agent turn is reproduced by `target`
    /// (one sampled replay per turn) within the edit-distance threshold.
    pub fn apply(&self, experience: &[Trajectory], target: &dyn Policy, seed: u64) -> Result<Vec<Trajectory>> {
        let mut rng = rng_for(seed, "challenging", 0);
        let mut kept = Vec::new();
        for h in experience {
            let mut all_match = true;
            for t in 1..=h.len() {
                let replay = target.sample(&h.turns[..2 * t - 1], &mut rng)?;
                if strsim::generic_levenshtein(&replay, &h.turns[2 * t - 1].tokens) > self.max_edit_distance {
                    all_match = false;
                }
            }
            if !all_match {
                kept.push(h.clone());
            }
        }
        Ok(kept)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::ticket::default_family;

    #[test]
    fn leave_one_out_excludes_the_held_out_agent() {
        let env = TicketToyEnv::default();
        let family = default_family();
        let exp = collect_leave_one_out(&env, &family, 3, 10, 1).unwrap();
        assert_eq!(exp.len(), 10 * (family.len() - 1));
        assert!(exp.iter().all(|h| h.agent_id != family[3].agent_id));
        assert_eq!(exp, collect_leave_one_out(&env, &family, 3, 10, 1).unwrap());
        let all = collect_family(&env, &family, 10, 1).unwrap();
        let others: Vec<Trajectory> = all
            .into_iter()
            .enumerate()
            .filter(|(j, _)| *j != 3)
            .flat_map(|(_, v)| v)
            .collect();
        assert_eq!(exp, others);
    }

    #[test]
    fn leave_one_out_needs_two_agents() {
        let env = TicketToyEnv::default();
        let family = default_family();
        assert!(collect_leave_one_out(&env, &family[..1], 0, 5, 1).is_err());
        assert!(collect_leave_one_out(&env, &family, family.len(), 5, 1).is_err());
        let exp = collect_leave_one_out(&env, &family[..3], 0, 5, 1).unwrap();
        assert!(exp.iter().all(|h| h.agent_id == family[1].agent_id || h.agent_id == family[2].agent_id));
    }

    #[test]
    fn challenging_filter_returns_a_subset() {
        let env = TicketToyEnv::default();
        let family = default_family();
        let exp = collect_leave_one_out(&env, &family, 0, 30, 2).unwrap();
        let target = TicketAgent::new(env, family[0].clone()).unwrap();
        let kept = ChallengingFilter::default().apply(&exp, &target, 5).unwrap();
        assert!(kept.len() < exp.len());
        assert!(!kept.is_empty());
        assert!(kept.iter().all(|h| exp.contains(h)));
        let loose = ChallengingFilter { max_edit_distance: 15 }.apply(&exp, &target, 5).unwrap();
        assert!(loose.is_empty());
    }
}
