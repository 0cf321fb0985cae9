//! Two-stage lattice search over regularization and nuisance weight.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{deviation_estimate_at, evaluate, DeviationFit, MetricSet};
pub use crate::optim::db_to_linear;
use crate::optim::{solve, CurrentPattern, Method, MethodParams, OptimError, SolverOptions, StimulusProblem};

/// Γ threshold of case A (A/m²).
pub const DEFAULT_THRESHOLD: f64 = 0.11;

#[derive(Debug, Error, PartialEq)]
pub enum SearchError {
    #[error("invalid lattice: {0}")]
    Spec(String),
    #[error("no candidate of run {run} reaches Γ ≥ {threshold} A/m²")]
    NoFeasibleCandidate { run: u8, threshold: f64 },
    #[error("run {run} produced no valid candidate")]
    NoValidCell { run: u8 },
    #[error("montage size {k} outside 2..={electrodes}")]
    MontageSize { k: usize, electrodes: usize },
    #[error(transparent)]
    Problem(#[from] OptimError),
}

/// Axis-aligned lattice in dB; the maxima are exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub alpha_db_min: f64,
    pub alpha_db_max: f64,
    pub weight_db_min: f64,
    pub weight_db_max: f64,
    pub step_db: f64,
}

fn axis_len(min: f64, max: f64, step: f64) -> Result<usize, SearchError> {
    if !(step > 0.0 && min.is_finite() && max.is_finite()) {
        return Err(SearchError::Spec(format!("bad axis {min}..{max} step {step}")));
    }
    let n = (max - min) / step;
    let r = n.round();
    if r < 1.0 || (n - r).abs() > 1e-9 * r.max(1.0) {
        return Err(SearchError::Spec(format!(
            "span {min}..{max} is not a positive multiple of {step} dB"
        )));
    }
    Ok(r as usize)
}

impl LatticeSpec {
    /// Per-method default ranges.
    pub fn default_for(method: Method, step_db: f64) -> Self {
        let (a, w) = match method {
            Method::L1l1 => ((-160.0, 20.0), (-160.0, 20.0)),
            Method::L1l2 => ((-140.0, 40.0), (-140.0, 40.0)),
            Method::Tls => ((-240.0, -60.0), (-100.0, 80.0)),
        };
        Self {
            alpha_db_min: a.0,
            alpha_db_max: a.1,
            weight_db_min: w.0,
            weight_db_max: w.1,
            step_db,
        }
    }

    /// A single cell at the given levels.
    pub fn single(alpha_db: f64, weight_db: f64) -> Self {
        Self {
            alpha_db_min: alpha_db,
            alpha_db_max: alpha_db + 1.0,
            weight_db_min: weight_db,
            weight_db_max: weight_db + 1.0,
            step_db: 1.0,
        }
    }

    /// `(α count, weight count)`.
    pub fn dims(&self) -> Result<(usize, usize), SearchError> {
        Ok((
            axis_len(self.alpha_db_min, self.alpha_db_max, self.step_db)?,
            axis_len(self.weight_db_min, self.weight_db_max, self.step_db)?,
        ))
    }

    pub fn alpha_values(&self) -> Result<Vec<f64>, SearchError> {
        let (n, _) = self.dims()?;
        Ok((0..n).map(|i| self.alpha_db_min + i as f64 * self.step_db).collect())
    }

    pub fn weight_values(&self) -> Result<Vec<f64>, SearchError> {
        let (_, n) = self.dims()?;
        Ok((0..n).map(|i| self.weight_db_min + i as f64 * self.step_db).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub params: MethodParams,
    pub pattern: CurrentPattern,
    pub metrics: Option<MetricSet>,
    pub valid: bool,
    /// `ok`, a solver status, or `metric_error`.
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateGrid {
    pub method: Method,
    pub spec: LatticeSpec,
    pub dims: (usize, usize),
    /// Row-major over (α index, weight index).
    pub cells: Vec<Candidate>,
}

impl CandidateGrid {
    pub fn cell(&self, i: usize, j: usize) -> &Candidate {
        &self.cells[i * self.dims.1 + j]
    }

    pub fn n_valid(&self) -> usize {
        self.cells.iter().filter(|c| c.valid).count()
    }

    fn valid_cells(&self) -> impl Iterator<Item = ((usize, usize), &Candidate, &MetricSet)> {
        let nw = self.dims.1;
        self.cells.iter().enumerate().filter_map(move |(k, c)| {
            if c.valid {
                c.metrics.as_ref().map(|m| ((k / nw, k % nw), c, m))
            } else {
                None
            }
        })
    }
}

fn candidate(p: &StimulusProblem, method: Method, params: MethodParams, opts: &SolverOptions) -> Candidate {
    let pattern = solve(method, p, params, opts);
    if !pattern.is_valid() {
        return Candidate {
            params,
            reason: pattern.status.as_str().to_string(),
            pattern,
            metrics: None,
            valid: false,
        };
    }
    match evaluate(p, &pattern.y) {
        Ok(m) if m.gamma.is_finite() && m.ad_deg.is_finite() && !m.theta.is_nan() => Candidate {
            params,
            pattern,
            metrics: Some(m),
            valid: true,
            reason: "ok".into(),
        },
        Ok(m) => Candidate {
            params,
            pattern,
            metrics: Some(m),
            valid: false,
            reason: "metric_error".into(),
        },
        Err(_) => Candidate {
            params,
            pattern,
            metrics: None,
            valid: false,
            reason: "metric_error".into(),
        },
    }
}

/// Solves every lattice cell. Cells are independent, so the result does not
/// depend on the evaluation schedule.
pub fn evaluate_lattice(
    p: &StimulusProblem,
    method: Method,
    spec: &LatticeSpec,
    opts: &SolverOptions,
) -> Result<CandidateGrid, SearchError> {
    let dims = spec.dims()?;
    let alphas = spec.alpha_values()?;
    let weights = spec.weight_values()?;
    let cells = (0..dims.0 * dims.1)
        .into_par_iter()
        .map(|k| {
            let params = MethodParams {
                alpha_db: alphas[k / dims.1],
                weight_db: weights[k % dims.1],
            };
            candidate(p, method, params, opts)
        })
        .collect();
    Ok(CandidateGrid {
        method,
        spec: *spec,
        dims,
        cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Case {
    A,
    B,
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Case::A => "A",
            Case::B => "B",
        })
    }
}

impl FromStr for Case {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" | "a" => Ok(Case::A),
            "B" | "b" => Ok(Case::B),
            other => Err(format!("unknown case '{other}' (expected A or B)")),
        }
    }
}

/// Max Θ among valid cells with `Γ ≥ threshold`; ties go to the lower α
/// index, then the lower weight index.
pub fn select_case_a(grid: &CandidateGrid, threshold: f64) -> Option<(usize, usize)> {
    let mut best: Option<((usize, usize), f64)> = None;
    for (ij, _, m) in grid.valid_cells() {
        if m.gamma >= threshold && best.is_none_or(|(_, t)| m.theta > t) {
            best = Some((ij, m.theta));
        }
    }
    best.map(|(ij, _)| ij)
}

/// Max Γ among valid cells with the same tie-break.
pub fn select_case_b(grid: &CandidateGrid) -> Option<(usize, usize)> {
    let mut best: Option<((usize, usize), f64)> = None;
    for (ij, _, m) in grid.valid_cells() {
        if best.is_none_or(|(_, g)| m.gamma > g) {
            best = Some((ij, m.gamma));
        }
    }
    best.map(|(ij, _)| ij)
}

pub fn select(grid: &CandidateGrid, case: Case, threshold: f64, run: u8) -> Result<(usize, usize), SearchError> {
    if grid.n_valid() == 0 {
        return Err(SearchError::NoValidCell { run });
    }
    match case {
        Case::A => select_case_a(grid, threshold).ok_or(SearchError::NoFeasibleCandidate { run, threshold }),
        Case::B => select_case_b(grid).ok_or(SearchError::NoValidCell { run }),
    }
}

/// Ids of the `k` largest `|y_ℓ|`, ties to the lower id, returned in
/// ascending id order.
pub fn restrict_montage(y: &[f64], ids: &[u32], k: usize) -> Result<Vec<u32>, SearchError> {
    if k < 2 || k > y.len() || ids.len() != y.len() {
        return Err(SearchError::MontageSize { k, electrodes: y.len() });
    }
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| y[b].abs().total_cmp(&y[a].abs()).then(ids[a].cmp(&ids[b])));
    let mut out: Vec<u32> = order[..k].iter().map(|&i| ids[i]).collect();
    out.sort_unstable();
    Ok(out)
}

/// Deviation fits of the four metrics around a selected cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationEstimate {
    pub gamma: DeviationFit,
    pub theta: DeviationFit,
    pub ad_deg: DeviationFit,
    pub max_current: DeviationFit,
    /// The 3×3 window was shifted inside the lattice.
    pub clamped: bool,
}

/// 3×3 window around `(i, j)`, shifted inside the lattice when the cell is
/// on the boundary. `None` for lattices narrower than 3 cells.
pub fn lattice_deviation(grid: &CandidateGrid, (i, j): (usize, usize)) -> Option<DeviationEstimate> {
    let (na, nw) = grid.dims;
    if na < 3 || nw < 3 {
        return None;
    }
    let i0 = i.saturating_sub(1).min(na - 3);
    let j0 = j.saturating_sub(1).min(nw - 3);
    let centre = ((i - i0) as f64 - 1.0, (j - j0) as f64 - 1.0);
    let window = |f: &dyn Fn(&MetricSet) -> f64| {
        let mut w = [[f64::NAN; 3]; 3];
        for (a, row) in w.iter_mut().enumerate() {
            for (b, v) in row.iter_mut().enumerate() {
                let c = grid.cell(i0 + a, j0 + b);
                if let (true, Some(m)) = (c.valid, c.metrics.as_ref()) {
                    *v = f(m);
                }
            }
        }
        deviation_estimate_at(&w, grid.spec.step_db, centre).ok()
    };
    Some(DeviationEstimate {
        gamma: window(&|m| m.gamma)?,
        theta: window(&|m| m.theta)?,
        ad_deg: window(&|m| m.ad_deg)?,
        max_current: window(&|m| m.max_current)?,
        clamped: i0 + 1 != i || j0 + 1 != j,
    })
}

/// Selected candidate of one run, with currents on the full montage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub cell: (usize, usize),
    pub params: MethodParams,
    pub metrics: MetricSet,
    /// Currents of all electrodes of the full problem (A); opted-out
    /// channels are zero.
    pub y: Vec<f64>,
    pub electrode_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub method: Method,
    pub case: Case,
    pub channels: usize,
    pub run1: RunResult,
    pub run2: RunResult,
    /// Electrodes kept for the second run.
    pub montage: Vec<u32>,
    pub deviation: Option<DeviationEstimate>,
}

fn run_result(p_full: &StimulusProblem, grid: &CandidateGrid, cell: (usize, usize)) -> RunResult {
    let c = grid.cell(cell.0, cell.1);
    let ids = &c.pattern.electrode_ids;
    let y = p_full
        .electrode_ids
        .iter()
        .map(|id| ids.iter().position(|x| x == id).map_or(0.0, |k| c.pattern.y[k]))
        .collect();
    RunResult {
        cell,
        params: c.params,
        metrics: c.metrics.expect("selected cells are valid"),
        y,
        electrode_ids: p_full.electrode_ids.clone(),
    }
}

/// Search settings shared by both runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchSettings {
    pub case: Case,
    pub channels: usize,
    pub threshold: f64,
}

/// Problem of the second run: the top-`k` electrodes of the run-1 selection.
pub fn second_run_problem(
    p: &StimulusProblem,
    run1: &CandidateGrid,
    settings: &SearchSettings,
) -> Result<(StimulusProblem, (usize, usize), Vec<u32>), SearchError> {
    let cell = select(run1, settings.case, settings.threshold, 1)?;
    let c = run1.cell(cell.0, cell.1);
    let montage = restrict_montage(&c.pattern.y, &c.pattern.electrode_ids, settings.channels)?;
    let columns: Vec<usize> = montage
        .iter()
        .map(|id| p.electrode_ids.iter().position(|x| x == id).expect("montage ids come from p"))
        .collect();
    Ok((p.restrict(&columns)?, cell, montage))
}

/// Completes a search given an already evaluated full-montage lattice.
pub fn finish_search(
    p: &StimulusProblem,
    run1: &CandidateGrid,
    run2: &CandidateGrid,
    cell1: (usize, usize),
    montage: Vec<u32>,
    settings: &SearchSettings,
) -> Result<SearchOutcome, SearchError> {
    let cell2 = select(run2, settings.case, settings.threshold, 2)?;
    Ok(SearchOutcome {
        method: run1.method,
        case: settings.case,
        channels: settings.channels,
        run1: run_result(p, run1, cell1),
        run2: run_result(p, run2, cell2),
        montage,
        deviation: lattice_deviation(run2, cell2),
    })
}

/// Run 1 on the full montage, selection, reduction to the `k` strongest
/// channels, run 2 on the reduced montage over the same lattice, selection
/// and deviation estimate.
pub fn two_run_search(
    p: &StimulusProblem,
    method: Method,
    settings: &SearchSettings,
    spec: &LatticeSpec,
    opts: &SolverOptions,
) -> Result<SearchOutcome, SearchError> {
    if settings.channels < 2 || settings.channels > p.n_electrodes() {
        return Err(SearchError::MontageSize {
            k: settings.channels,
            electrodes: p.n_electrodes(),
        });
    }
    let run1 = evaluate_lattice(p, method, spec, opts)?;
    let (p2, cell1, montage) = second_run_problem(p, &run1, settings)?;
    let run2 = evaluate_lattice(&p2, method, spec, opts)?;
    finish_search(p, &run1, &run2, cell1, montage, settings)
}

/// One CSV row of a lattice dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeRow {
    pub alpha_db: f64,
    pub weight_db: f64,
    pub gamma: f64,
    pub theta: f64,
    pub ad_deg: f64,
    pub max_current_ma: f64,
    pub status: String,
}

pub fn lattice_rows(grid: &CandidateGrid) -> Vec<LatticeRow> {
    grid.cells
        .iter()
        .map(|c| {
            let m = c.metrics.unwrap_or(MetricSet {
                gamma: f64::NAN,
                theta: f64::NAN,
                ad_deg: f64::NAN,
                max_current: f64::NAN,
                theta_sentinel: false,
            });
            LatticeRow {
                alpha_db: c.params.alpha_db,
                weight_db: c.params.weight_db,
                gamma: m.gamma,
                theta: m.theta,
                ad_deg: m.ad_deg,
                max_current_ma: m.max_current * 1e3,
                status: c.reason.clone(),
            }
        })
        .collect()
}
