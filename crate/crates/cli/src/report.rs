//! Sweep reports: JSON and CSV forms that round-trip to the same value.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use ope_core::dice::EstimateReport;
use ope_core::{OpeError, Result};

use crate::stats::{pearson, spearman};
use crate::sweep::{Method, SweepConfig};

pub const CSV_HEADER: [&str; 6] = [
    "agent_id",
    "true_value",
    "enigma_estimate",
    "lstdq_estimate",
    "selfplay_estimate",
    "behavior_mean",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRow {
    pub agent_id: String,
    pub true_value: f64,
    pub enigma_estimate: Option<f64>,
    pub lstdq_estimate: Option<f64>,
    pub selfplay_estimate: Option<f64>,
    pub behavior_mean: Option<f64>,
}

impl AgentRow {
    pub fn estimate(&self, method: &str) -> Option<f64> {
        match method {
            "enigma" => self.enigma_estimate,
            "lstdq" => self.lstdq_estimate,
            "selfplay" => self.selfplay_estimate,
            "behavior_mean" => self.behavior_mean,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub agent_id: String,
    pub method: String,
    pub error: String,
}

/// Correlation with the true values; `None` when undefined (fewer than 3
/// agents with estimates, or zero variance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config: SweepConfig,
    pub rows: Vec<AgentRow>,
    pub correlations: BTreeMap<String, Correlation>,
    pub failures: Vec<Failure>,
}

/// Correlations for every run method plus the behavior mean.
pub fn compute_correlations(rows: &[AgentRow], methods: &[Method]) -> BTreeMap<String, Correlation> {
    let mut names: Vec<&str> = methods.iter().map(|m| m.name()).collect();
    names.push("behavior_mean");
    let mut out = BTreeMap::new();
    for name in names {
        let (truth, est): (Vec<f64>, Vec<f64>) = rows
            .iter()
            .filter_map(|r| r.estimate(name).map(|e| (r.true_value, e)))
            .unzip();
        let undefined = |e: OpeError| {
            log::warn!("{name}: correlation undefined ({e})");
        };
        let c = Correlation {
            pearson: pearson(&truth, &est).map_err(undefined).ok(),
            spearman: spearman(&truth, &est).map_err(undefined).ok(),
            n: truth.len(),
        };
        out.insert(name.to_string(), c);
    }
    out
}

/// The CSV preamble: everything in a report that is not a row.
#[derive(Serialize, Deserialize)]
struct Preamble {
    seed: u64,
    config: SweepConfig,
    failures: Vec<Failure>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// One `# {...}` comment line with seed, config and failures, then a
    /// header row and one row per agent. Missing estimates are empty cells.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let preamble = Preamble {
            seed: self.seed,
            config: self.config.clone(),
            failures: self.failures.clone(),
        };
        writeln!(w, "# {}", serde_json::to_string(&preamble)?)?;
        let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        csv.write_record(CSV_HEADER)?;
        for r in &self.rows {
            csv.serialize(r)?;
        }
        csv.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
    }

    /// Reads a report written by [`RunReport::write_csv`]; correlations are
    /// recomputed from the rows.
    pub fn read_csv<R: BufRead>(mut r: R) -> Result<Self> {
        let mut first = String::new();
        r.read_line(&mut first)?;
        let json = first
            .trim_end()
            .strip_prefix("# ")
            .ok_or_else(|| OpeError::Config("report CSV must start with a '# ' preamble line".into()))?;
        let preamble: Preamble = serde_json::from_str(json)?;
        let mut csv = csv::Reader::from_reader(r);
        let header: Vec<String> = csv.headers()?.iter().map(str::to_string).collect();
        if header != CSV_HEADER {
            return Err(OpeError::Config(format!("unexpected report header {header:?}")));
        }
        let rows = csv.deserialize().collect::<std::result::Result<Vec<AgentRow>, _>>()?;
        let correlations = compute_correlations(&rows, &preamble.config.methods);
        Ok(RunReport {
            seed: preamble.seed,
            config: preamble.config,
            rows,
            correlations,
            failures: preamble.failures,
        })
    }
}

/// Training curves as `agent_id,method,step,loss,estimate`.
pub fn write_curves_csv<W: Write>(estimates: &[EstimateReport], w: W) -> Result<()> {
    let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    csv.write_record(["agent_id", "method", "step", "loss", "estimate"])?;
    for e in estimates {
        for p in &e.curve {
            csv.serialize((&e.agent_id, &e.method, p.step, p.loss, p.estimate))?;
        }
    }
    csv.flush()?;
    Ok(())
}
