//! Leave-one-agent-out evaluation of every estimator over an agent family.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use ope_core::baselines::{
    behavior_mean_baseline, lstdq_estimate, model_based_selfplay_estimate, LstdqConfig, SelfPlayConfig,
};
use ope_core::dice::{generate_ope_data, run_enigma_on, DiceConfig, EstimateReport, KeyingKind, ModelConfig, OptimizerKind};
use ope_core::envs::ticket::{default_family, monte_carlo_value, AgentSpec, TicketAgent, TicketToyEnv};
use ope_core::envs::{collect_leave_one_out, ChallengingFilter};
use ope_core::seed::{derive_seed, rng_for};
use ope_core::trajectory::Trajectory;
use ope_core::{OpeError, Result};

use crate::report::{compute_correlations, AgentRow, Failure, RunReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Enigma,
    Lstdq,
    Selfplay,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Enigma, Method::Lstdq, Method::Selfplay];

    pub fn name(self) -> &'static str {
        match self {
            Method::Enigma => "enigma",
            Method::Lstdq => "lstdq",
            Method::Selfplay => "selfplay",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TruthMode {
    /// Dynamic program over hint counts.
    Exact,
    MonteCarlo {
        #[serde(default = "d_truth_episodes")]
        episodes: usize,
    },
}

fn d_truth_episodes() -> usize {
    20_000
}
fn d_truth() -> TruthMode {
    TruthMode::MonteCarlo {
        episodes: d_truth_episodes(),
    }
}
fn d_episodes() -> usize {
    100
}
fn d_subsample() -> f64 {
    1.0
}
fn d_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}
fn d_workers() -> usize {
    1
}
fn d_max_failure_fraction() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub env: TicketToyEnv,
    #[serde(default = "default_family")]
    pub agents: Vec<AgentSpec>,
    #[serde(default = "d_episodes")]
    pub episodes_per_agent: usize,
    /// Fraction of the leave-one-out experience kept for estimation.
    #[serde(default = "d_subsample")]
    pub subsample: f64,
    #[serde(default)]
    pub challenging: Option<ChallengingFilter>,
    #[serde(default = "d_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "d_truth")]
    pub truth: TruthMode,
    /// Estimator settings; `None` selects [`sweep_dice_config`].
    #[serde(default)]
    pub dice: Option<DiceConfig>,
    #[serde(default)]
    pub lstdq: LstdqConfig,
    #[serde(default)]
    pub selfplay: SelfPlayConfig,
    #[serde(default = "d_workers")]
    pub workers: usize,
    #[serde(default = "d_max_failure_fraction")]
    pub max_failure_fraction: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

/// Tabular critic keyed on bag-of-token features, trained full-batch with Adam.
pub fn sweep_dice_config(env: &TicketToyEnv) -> DiceConfig {
    let mut cfg = DiceConfig::new(env.t_max);
    cfg.model = ModelConfig::Tabular {
        keying: KeyingKind::Features,
    };
    cfg.optimizer = OptimizerKind::Adam;
    cfg.lr = 0.02;
    cfg.warmup = 1;
    cfg.steps = 5000;
    cfg.batch_size = 100_000;
    cfg.vocab_size = Some(env.vocab_size());
    cfg
}

impl SweepConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SweepConfig = serde_json::from_str(text).map_err(|e| OpeError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dice_config(&self) -> DiceConfig {
        self.dice.clone().unwrap_or_else(|| sweep_dice_config(&self.env))
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        if self.agents.len() < 2 {
            return Err(OpeError::Config("a sweep needs at least 2 agents".into()));
        }
        let mut ids: Vec<&str> = self.agents.iter().map(|a| a.agent_id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(OpeError::Config("agent ids must be unique".into()));
        }
        for a in &self.agents {
            TicketAgent::new(self.env, a.clone())?;
        }
        if self.episodes_per_agent == 0 {
            return Err(OpeError::Config("episodes_per_agent must be positive".into()));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(OpeError::Config(format!("subsample {} outside (0, 1]", self.subsample)));
        }
        if self.workers == 0 {
            return Err(OpeError::Config("workers must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return Err(OpeError::Config("max_failure_fraction outside [0, 1]".into()));
        }
        if let TruthMode::MonteCarlo { episodes: 0 } = self.truth {
            return Err(OpeError::Config("Monte-Carlo truth needs episodes".into()));
        }
        let dice = self.dice_config();
        dice.validate()?;
        if dice.t_max != self.env.t_max {
            return Err(OpeError::Config(format!(
                "dice.t_max {} differs from env.t_max {}",
                dice.t_max, self.env.t_max
            )));
        }
        Ok(())
    }

    fn runs(&self, m: Method) -> bool {
        self.methods.contains(&m)
    }
}

/// Everything one agent's evaluation produced.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentOutcome {
    pub row: AgentRow,
    pub estimates: Vec<EstimateReport>,
    pub failures: Vec<Failure>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub report: RunReport,
    /// Per-agent, per-method reports including ENIGMA training curves.
    pub estimates: Vec<EstimateReport>,
}

pub fn true_value(cfg: &SweepConfig, index: usize) -> Result<f64> {
    let agent = TicketAgent::new(cfg.env, cfg.agents[index].clone())?;
    match cfg.truth {
        TruthMode::Exact => cfg.env.exact_value(&agent),
        TruthMode::MonteCarlo { episodes } => {
            monte_carlo_value(&cfg.env, &agent, episodes, derive_seed(cfg.seed, "truth", index as u64))
        }
    }
}

/// Leave-one-out experience for agent `index`, after subsampling and the
/// optional challenging filter.
pub fn experience_for(cfg: &SweepConfig, index: usize) -> Result<Vec<Trajectory>> {
    let mut exp = collect_leave_one_out(
        &cfg.env,
        &cfg.agents,
        index,
        cfg.episodes_per_agent,
        derive_seed(cfg.seed, "collect", 0),
    )?;
    if cfg.subsample < 1.0 {
        let keep = ((cfg.subsample * exp.len() as f64).ceil() as usize).clamp(1, exp.len());
        let mut rng = rng_for(cfg.seed, "subsample", index as u64);
        let mut idx = sample(&mut rng, exp.len(), keep).into_vec();
        idx.sort_unstable();
        exp = idx.into_iter().map(|i| exp[i].clone()).collect();
    }
    if let Some(filter) = &cfg.challenging {
        let target = TicketAgent::new(cfg.env, cfg.agents[index].clone())?;
        exp = filter.apply(&exp, &target, derive_seed(cfg.seed, "challenging", index as u64))?;
        if exp.is_empty() {
            return Err(OpeError::Empty("challenging filter removed every dialog".into()));
        }
    }
    Ok(exp)
}

/// Runs every configured estimator for agent `index`. Estimator errors are
/// recorded, not raised.
pub fn evaluate_agent(cfg: &SweepConfig, index: usize) -> Result<AgentOutcome> {
    let spec = &cfg.agents[index];
    let agent = TicketAgent::new(cfg.env, spec.clone())?;
    let mut row = AgentRow {
        agent_id: spec.agent_id.clone(),
        true_value: true_value(cfg, index)?,
        enigma_estimate: None,
        lstdq_estimate: None,
        selfplay_estimate: None,
        behavior_mean: None,
    };
    let mut estimates = Vec::new();
    let mut failures = Vec::new();
    let mut fail = |method: &str, e: OpeError| {
        log::warn!("{} / {method}: {e}", spec.agent_id);
        failures.push(Failure {
            agent_id: spec.agent_id.clone(),
            method: method.to_string(),
            error: e.to_string(),
        });
    };
    let exp = match experience_for(cfg, index) {
        Ok(exp) => exp,
        Err(e) => {
            fail("collect", e);
            return Ok(AgentOutcome { row, estimates, failures });
        }
    };
    match behavior_mean_baseline(&exp) {
        Ok(v) => row.behavior_mean = Some(v),
        Err(e) => fail("behavior_mean", e),
    }
    let mut dice = cfg.dice_config();
    dice.seed = derive_seed(cfg.seed, "enigma", index as u64);
    let wants_data = cfg.runs(Method::Enigma) || cfg.runs(Method::Lstdq);
    let data = if wants_data {
        match generate_ope_data(&exp, &agent, &dice) {
            Ok(d) => Some(d),
            Err(e) => {
                fail("generate_ope_data", e);
                None
            }
        }
    } else {
        None
    };
    if let (true, Some(data)) = (cfg.runs(Method::Enigma), &data) {
        match run_enigma_on(data.clone(), Some(&agent), &dice) {
            Ok(out) => {
                row.enigma_estimate = Some(out.estimate);
                estimates.push(EstimateReport::from_enigma(&spec.agent_id, &out, &dice));
            }
            Err(e) => fail("enigma", e),
        }
    }
    if let (true, Some(data)) = (cfg.runs(Method::Lstdq), &data) {
        let mut lcfg = cfg.lstdq.clone();
        lcfg.vocab_size = lcfg.vocab_size.or(Some(cfg.env.vocab_size()));
        match lstdq_estimate(data, &lcfg) {
            Ok(out) => {
                row.lstdq_estimate = Some(out.estimate);
                estimates.push(simple_report(&spec.agent_id, "lstdq", out.estimate, &lcfg));
            }
            Err(e) => fail("lstdq", e),
        }
    }
    if cfg.runs(Method::Selfplay) {
        let mut scfg = cfg.selfplay.clone();
        scfg.vocab_size = scfg.vocab_size.or(Some(cfg.env.vocab_size()));
        let seed = derive_seed(cfg.seed, "selfplay", index as u64);
        match model_based_selfplay_estimate(&exp, &agent, cfg.env.t_max, &scfg, seed) {
            Ok(out) => {
                row.selfplay_estimate = Some(out.estimate);
                estimates.push(simple_report(&spec.agent_id, "selfplay", out.estimate, &scfg));
            }
            Err(e) => fail("selfplay", e),
        }
    }
    Ok(AgentOutcome { row, estimates, failures })
}

fn simple_report<C: Serialize>(agent_id: &str, method: &str, estimate: f64, cfg: &C) -> EstimateReport {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_vec(cfg).expect("config serializes");
    EstimateReport {
        agent_id: agent_id.to_string(),
        method: method.to_string(),
        estimate,
        config_hash: hex::encode(Sha256::digest(&json)),
        curve: Vec::new(),
        coverage_stats: None,
    }
}

/// Evaluates every agent against the others' experience and assembles the report.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepOutput> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| OpeError::Config(e.to_string()))?;
    let outcomes: Vec<AgentOutcome> = pool.install(|| {
        (0..cfg.agents.len())
            .into_par_iter()
            .map(|i| evaluate_agent(cfg, i))
            .collect::<Result<Vec<_>>>()
    })?;
    let failed_agents: Vec<&AgentOutcome> = outcomes.iter().filter(|o| !o.failures.is_empty()).collect();
    let total = outcomes.len();
    if failed_agents.len() as f64 > cfg.max_failure_fraction * total as f64 {
        let first = &failed_agents[0].failures[0];
        return Err(OpeError::SweepFailed {
            failed: failed_agents.len(),
            total,
            first: format!("{} / {}: {}", first.agent_id, first.method, first.error),
        });
    }
    let mut rows = Vec::with_capacity(total);
    let mut estimates = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        rows.push(o.row);
        estimates.extend(o.estimates);
        failures.extend(o.failures);
    }
    let correlations = compute_correlations(&rows, &cfg.methods);
    Ok(SweepOutput {
        report: RunReport {
            seed: cfg.seed,
            config: cfg.clone(),
            rows,
            correlations,
            failures,
        },
        estimates,
    })
}
