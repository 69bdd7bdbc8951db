use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ope_cli::oracle_check::run_oracle_check;
use ope_cli::report::write_curves_csv;
use ope_cli::sweep::{evaluate_agent, experience_for};
use ope_cli::{run_sweep, Method, RunReport, SweepConfig};
use ope_core::envs::{collect_family, ChallengingFilter};
use ope_core::seed::derive_seed;
use ope_core::trajectory::write_experience;
use ope_core::OpeError;

const EXIT_CONFIG: u8 = 2;
const EXIT_ESTIMATION: u8 = 3;
const EXIT_THRESHOLD: u8 = 4;

#[derive(Parser)]
#[command(name = "ope", version, about = "Off-policy evaluation of dialog agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the padded stationary-distribution identities on random MDPs.
    OracleCheck {
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate one agent against the others' experience.
    Estimate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        agent: String,
    },
    /// Evaluate every agent and report correlations with the true values.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Exit with status 4 when ENIGMA's Spearman correlation is below this.
        #[arg(long)]
        min_spearman: Option<f64>,
    },
    /// Write experience as JSON lines: leave-one-out for `--agent`, else every agent's rollouts.
    Collect {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        agent: Option<String>,
    },
    /// Recompute correlations from a stored report (CSV or JSON).
    Report {
        path: PathBuf,
        #[arg(long)]
        min_spearman: Option<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Enigma,
    Lstdq,
    Selfplay,
    All,
}

#[derive(Args)]
struct RunArgs {
    /// Sweep configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Fraction of leave-one-out experience to keep.
    #[arg(long)]
    subsample: Option<f64>,
    /// Drop dialogs the target reproduces turn by turn.
    #[arg(long)]
    challenging: bool,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    workers: Option<usize>,
}

enum Failure {
    Config(String),
    Estimation(String),
    Threshold(String),
}

impl Failure {
    fn config(e: impl std::fmt::Display) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<OpeError> for Failure {
    fn from(e: OpeError) -> Self {
        match e {
            OpeError::Config(_) | OpeError::Json(_) => Failure::Config(e.to_string()),
            _ => Failure::Estimation(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Estimation(e.to_string())
    }
}

fn load_config(run: &RunArgs) -> Result<SweepConfig, Failure> {
    let mut cfg = match &run.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            SweepConfig::from_json(&text).map_err(Failure::config)?
        }
        None => SweepConfig::default(),
    };
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    if let Some(f) = run.subsample {
        cfg.subsample = f;
    }
    if run.challenging && cfg.challenging.is_none() {
        cfg.challenging = Some(ChallengingFilter::default());
    }
    if let Some(m) = run.method {
        cfg.methods = match m {
            MethodArg::Enigma => vec![Method::Enigma],
            MethodArg::Lstdq => vec![Method::Lstdq],
            MethodArg::Selfplay => vec![Method::Selfplay],
            MethodArg::All => Method::ALL.to_vec(),
        };
    }
    if let Some(w) = run.workers {
        cfg.workers = w;
    }
    cfg.validate().map_err(Failure::config)?;
    Ok(cfg)
}

fn agent_index(cfg: &SweepConfig, id: &str) -> Result<usize, Failure> {
    cfg.agents
        .iter()
        .position(|a| a.agent_id == id)
        .ok_or_else(|| Failure::Config(format!("no agent with id {id:?}")))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, Failure> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn print_correlations(report: &RunReport) {
    let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"));
    println!("{:<15} {:>10} {:>10} {:>4}", "method", "pearson", "spearman", "n");
    for (name, c) in &report.correlations {
        println!("{name:<15} {:>10} {:>10} {:>4}", fmt(c.pearson), fmt(c.spearman), c.n);
    }
}

fn check_threshold(report: &RunReport, min: Option<f64>) -> Result<(), Failure> {
    let Some(min) = min else { return Ok(()) };
    match report.correlations.get("enigma").and_then(|c| c.spearman) {
        Some(s) if s >= min => Ok(()),
        Some(s) => Err(Failure::Threshold(format!("ENIGMA Spearman {s:.4} below {min}"))),
        None => Err(Failure::Threshold("ENIGMA Spearman undefined".into())),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::OracleCheck { instances, seed, out } => {
            let report = run_oracle_check(instances, seed)?;
            println!(
                "{} instances: formula vs fixed point {:.2e}, pad weight {:.2e}, value {:.2e}; counterexample {}",
                report.instances.len(),
                report.max_formula_vs_fixed_point,
                report.max_pad_weight_error,
                report.max_value_error,
                if report.counterexample.passed { "ok" } else { "FAILED" },
            );
            if let Some(dir) = out {
                let mut w = create(&dir, "oracle_check.json")?;
                serde_json::to_writer_pretty(&mut w, &report).map_err(OpeError::from)?;
                w.flush()?;
            }
            if !report.passed {
                return Err(Failure::Threshold("oracle identities violated".into()));
            }
        }
        Command::Estimate { run, agent } => {
            let cfg = load_config(&run)?;
            let index = agent_index(&cfg, &agent)?;
            let outcome = evaluate_agent(&cfg, index)?;
            println!("{}", serde_json::to_string_pretty(&outcome.row).map_err(OpeError::from)?);
            let mut w = create(&run.out, &format!("{agent}_estimates.json"))?;
            serde_json::to_writer_pretty(&mut w, &outcome.estimates).map_err(OpeError::from)?;
            w.flush()?;
            write_curves_csv(&outcome.estimates, create(&run.out, &format!("{agent}_curves.csv"))?)?;
            if let Some(f) = outcome.failures.first() {
                return Err(Failure::Estimation(format!("{} / {}: {}", f.agent_id, f.method, f.error)));
            }
        }
        Command::Sweep { run, min_spearman } => {
            let cfg = load_config(&run)?;
            let out = run_sweep(&cfg)?;
            let report = &out.report;
            let mut w = create(&run.out, "report.json")?;
            w.write_all(report.to_json()?.as_bytes())?;
            w.flush()?;
            let mut w = create(&run.out, "report.csv")?;
            report.write_csv(&mut w)?;
            w.flush()?;
            let mut w = create(&run.out, "estimates.json")?;
            serde_json::to_writer_pretty(&mut w, &out.estimates).map_err(OpeError::from)?;
            w.flush()?;
            write_curves_csv(&out.estimates, create(&run.out, "curves.csv")?)?;
            print_correlations(report);
            for f in &report.failures {
                eprintln!("failure: {} / {}: {}", f.agent_id, f.method, f.error);
            }
            check_threshold(report, min_spearman)?;
        }
        Command::Collect { run, agent } => {
            let cfg = load_config(&run)?;
            let (name, exp) = match agent {
                Some(id) => {
                    let index = agent_index(&cfg, &id)?;
                    (format!("experience_without_{id}.jsonl"), experience_for(&cfg, index)?)
                }
                None => {
                    let seed = derive_seed(cfg.seed, "collect", 0);
                    let all = collect_family(&cfg.env, &cfg.agents, cfg.episodes_per_agent, seed)?;
                    ("experience.jsonl".to_string(), all.concat())
                }
            };
            let mut w = create(&run.out, &name)?;
            write_experience(&mut w, &exp)?;
            w.flush()?;
            println!("{} dialogs -> {}", exp.len(), run.out.join(name).display());
        }
        Command::Report { path, min_spearman } => {
            let file = File::open(&path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            let report = if path.extension().is_some_and(|e| e == "json") {
                let text = std::io::read_to_string(file)?;
                let mut r = RunReport::from_json(&text).map_err(Failure::config)?;
                r.correlations = ope_cli::report::compute_correlations(&r.rows, &r.config.methods);
                r
            } else {
                RunReport::read_csv(BufReader::new(file)).map_err(Failure::config)?
            };
            print_correlations(&report);
            check_threshold(&report, min_spearman)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Estimation(m)) => {
            eprintln!("estimation failed: {m}");
            ExitCode::from(EXIT_ESTIMATION)
        }
        Err(Failure::Threshold(m)) => {
            eprintln!("threshold not met: {m}");
            ExitCode::from(EXIT_THRESHOLD)
        }
    }
}
