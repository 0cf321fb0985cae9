//! `results.json`: one record per (method, case, channels) search.

use std::path::Path;

use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};
use tesopt_core::metrics::MetricSet;
use tesopt_core::optim::Method;
use tesopt_core::search::{Case, DeviationEstimate, RunResult, SearchOutcome};

/// JSON Schema of `results.json`.
pub const RESULTS_SCHEMA: &str = include_str!("../schema/results.schema.json");
pub const RESULTS_FORMAT: &str = "tesopt-results";
pub const RESULTS_VERSION: u32 = 1;

/// Non-finite values are stored as `null`.
pub fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Ok,
    NoFeasibleCandidate,
    NoValidCell,
}

/// Metrics of one selected candidate, currents in mA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Selection {
    pub cell: [usize; 2],
    pub alpha_db: f64,
    pub weight_db: f64,
    pub max_current_ma: f64,
    pub gamma: f64,
    pub ad_deg: Option<f64>,
    pub theta: Option<f64>,
    pub theta_sentinel: bool,
    /// Currents of all first-run electrodes (mA), zero where opted out.
    pub y_ma: Vec<f64>,
}

impl Selection {
    pub fn from_run(run: &RunResult) -> Self {
        Self {
            cell: [run.cell.0, run.cell.1],
            alpha_db: run.params.alpha_db,
            weight_db: run.params.weight_db,
            max_current_ma: run.metrics.max_current * 1e3,
            gamma: run.metrics.gamma,
            ad_deg: finite(run.metrics.ad_deg),
            theta: finite(run.metrics.theta),
            theta_sentinel: run.metrics.theta_sentinel,
            y_ma: run.y.iter().map(|v| v * 1e3).collect(),
        }
    }
}

/// Second-order fit deviations over the 3×3 neighbourhood.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Deviations {
    pub max_current_ma: Option<f64>,
    pub gamma: Option<f64>,
    pub ad_deg: Option<f64>,
    pub theta: Option<f64>,
    /// The window was shifted inside the lattice.
    pub clamped: bool,
}

impl Deviations {
    pub fn from_estimate(d: &DeviationEstimate) -> Self {
        Self {
            max_current_ma: finite(d.max_current.deviation * 1e3),
            gamma: finite(d.gamma.deviation),
            ad_deg: finite(d.ad_deg.deviation),
            theta: finite(d.theta.deviation),
            clamped: d.clamped,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRecord {
    pub method: Method,
    pub case: Case,
    pub channels: usize,
    pub status: RecordStatus,
    pub message: Option<String>,
    pub run1: Option<Selection>,
    pub run2: Option<Selection>,
    /// Electrode ids of the second run.
    pub montage: Vec<u32>,
    pub deviation: Option<Deviations>,
}

impl ResultRecord {
    pub fn from_outcome(o: &SearchOutcome) -> Self {
        Self {
            method: o.method,
            case: o.case,
            channels: o.channels,
            status: RecordStatus::Ok,
            message: None,
            run1: Some(Selection::from_run(&o.run1)),
            run2: Some(Selection::from_run(&o.run2)),
            montage: o.montage.clone(),
            deviation: o.deviation.as_ref().map(Deviations::from_estimate),
        }
    }

    pub fn failed(method: Method, case: Case, channels: usize, status: RecordStatus, message: String) -> Self {
        Self {
            method,
            case,
            channels,
            status,
            message: Some(message),
            run1: None,
            run2: None,
            montage: Vec::new(),
            deviation: None,
        }
    }

    /// The reported (second-run) metrics.
    pub fn metrics(&self) -> Option<MetricSet> {
        self.run2.as_ref().map(|s| MetricSet {
            gamma: s.gamma,
            theta: s.theta.unwrap_or(f64::INFINITY),
            ad_deg: s.ad_deg.unwrap_or(f64::NAN),
            max_current: s.max_current_ma * 1e-3,
            theta_sentinel: s.theta_sentinel,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultsFile {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub records: Vec<ResultRecord>,
}

impl ResultsFile {
    pub fn new(seed: u64, records: Vec<ResultRecord>) -> Self {
        Self {
            format: RESULTS_FORMAT.into(),
            version: RESULTS_VERSION,
            seed,
            records,
        }
    }
}

/// Checks a JSON document against [`RESULTS_SCHEMA`], listing every
/// violation with its location.
pub fn validate_results(doc: &serde_json::Value) -> Result<()> {
    let schema: serde_json::Value = serde_json::from_str(RESULTS_SCHEMA).expect("shipped schema is valid JSON");
    let validator = jsonschema::validator_for(&schema).map_err(|e| anyhow!("invalid results schema: {e}"))?;
    let errors: Vec<String> = validator
        .iter_errors(doc)
        .map(|e| format!("{}: {}", e.instance_path(), e))
        .collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(anyhow!("results do not match the schema:\n  {}", errors.join("\n  ")))
    }
}

pub fn read_results(path: &Path) -> Result<ResultsFile> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let doc: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    validate_results(&doc).with_context(|| format!("validating {}", path.display()))?;
    serde_json::from_value(doc).with_context(|| format!("decoding {}", path.display()))
}
