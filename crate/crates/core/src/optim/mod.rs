//! The three stimulation optimizers and the shared problem types.

mod l1l1;
mod l1l2;
mod tls;

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use l1l1::{build_l1l1_lp, l1l1_objective, solve_l1l1, solve_l1l1_with, L1l1Layout};
pub use l1l2::{l1l2_objective, project_feasible, prox_l1_feasible, solve_l1l2, solve_l1l2_with, L1l2Options, Projection};
pub use tls::{solve_tls, tls_diagnostics, tls_raw, TlsDiagnostics};

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("linear system is singular")]
    Singular,
}

/// `10^(d/20)`, the amplitude convention for decibels.
pub fn db_to_linear(d: f64) -> f64 {
    10f64.powf(d / 20.0)
}

/// Target/nuisance split of the lead field with dose limits and scales.
#[derive(Debug, Clone)]
pub struct StimulusProblem {
    /// `3×L` focused rows.
    pub l1: DMatrix<f64>,
    /// `M×L` nuisance rows.
    pub l2: DMatrix<f64>,
    pub x1: DVector<f64>,
    /// Total dose cap (A).
    pub mu: f64,
    /// Per-channel cap (A), always `μ/2`.
    pub gamma: f64,
    pub zeta: f64,
    pub nu: f64,
    pub sigma_scale: f64,
    pub electrode_ids: Vec<u32>,
    l2_gram: DMatrix<f64>,
    l2_r: DMatrix<f64>,
}

impl StimulusProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        l1: DMatrix<f64>,
        l2: DMatrix<f64>,
        x1: DVector<f64>,
        mu: f64,
        gamma: f64,
        zeta: f64,
        nu: f64,
        sigma_scale: f64,
        electrode_ids: Vec<u32>,
    ) -> Result<Self, OptimError> {
        let l = l1.ncols();
        let bad = |m: String| Err(OptimError::InvalidProblem(m));
        if l < 2 {
            return bad(format!("need at least 2 electrodes, got {l}"));
        }
        if l2.ncols() != l || electrode_ids.len() != l {
            return bad("column counts of L1, L2 and electrode ids differ".into());
        }
        if x1.len() != l1.nrows() {
            return bad(format!("x1 has {} entries for {} target rows", x1.len(), l1.nrows()));
        }
        if !(mu > 0.0 && mu.is_finite()) {
            return bad(format!("dose cap must be positive, got {mu}"));
        }
        if (gamma - mu / 2.0).abs() > 1e-12 * mu {
            return bad(format!("channel cap {gamma} must equal half the dose cap {mu}"));
        }
        if !(zeta > 0.0 && sigma_scale > 0.0 && nu >= 0.0) || ![zeta, nu, sigma_scale].iter().all(|v| v.is_finite()) {
            return bad(format!("scaling factors must be positive: ζ={zeta}, ν={nu}, σ={sigma_scale}"));
        }
        if l1.iter().chain(l2.iter()).chain(x1.iter()).any(|v| !v.is_finite()) {
            return bad("non-finite matrix entry".into());
        }
        let l2_gram = l2.transpose() * &l2;
        let l2_r = if l2.nrows() >= l {
            l2.clone().qr().r()
        } else {
            l2.clone()
        };
        Ok(Self {
            l1,
            l2,
            x1,
            mu,
            gamma: mu / 2.0,
            zeta,
            nu,
            sigma_scale,
            electrode_ids,
            l2_gram,
            l2_r,
        })
    }

    pub fn n_electrodes(&self) -> usize {
        self.l1.ncols()
    }

    /// Nuisance row count `M`.
    pub fn n_nuisance(&self) -> usize {
        self.l2.nrows()
    }

    /// `L₂ᵀL₂`.
    pub fn l2_gram(&self) -> &DMatrix<f64> {
        &self.l2_gram
    }

    /// Upper-triangular `Q` with `‖Qy‖₂ = ‖L₂y‖₂` for all `y`.
    pub fn l2_compressed(&self) -> &DMatrix<f64> {
        &self.l2_r
    }

    /// Keeps only `columns` (0-based positions); scales and dose limits are
    /// those of the full problem.
    pub fn restrict(&self, columns: &[usize]) -> Result<Self, OptimError> {
        if columns.iter().any(|&c| c >= self.n_electrodes()) {
            return Err(OptimError::InvalidParameter("column out of range".into()));
        }
        Self::new(
            self.l1.select_columns(columns),
            self.l2.select_columns(columns),
            self.x1.clone(),
            self.mu,
            self.gamma,
            self.zeta,
            self.nu,
            self.sigma_scale,
            columns.iter().map(|&c| self.electrode_ids[c]).collect(),
        )
    }

    /// Same problem with the target field negated.
    pub fn negated_target(&self) -> Self {
        let mut p = self.clone();
        p.x1 = -&p.x1;
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    L1l1,
    L1l2,
    Tls,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::L1l1, Method::L1l2, Method::Tls];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::L1l1 => "l1l1",
            Method::L1l2 => "l1l2",
            Method::Tls => "tls",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "l1l1" => Ok(Method::L1l1),
            "l1l2" => Ok(Method::L1l2),
            "tls" => Ok(Method::Tls),
            other => Err(format!("unknown method '{other}' (expected l1l1, l1l2 or tls)")),
        }
    }
}

/// Regularization and nuisance-weight levels in dB. The weight is `ε` for
/// L1L1/L1L2 and `δ` for TLS.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodParams {
    pub alpha_db: f64,
    pub weight_db: f64,
}

impl MethodParams {
    pub fn new(alpha_db: f64, weight_db: f64) -> Result<Self, OptimError> {
        if !(alpha_db.is_finite() && weight_db.is_finite()) {
            return Err(OptimError::InvalidParameter(format!(
                "dB levels must be finite: {alpha_db}, {weight_db}"
            )));
        }
        Ok(Self { alpha_db, weight_db })
    }

    pub fn alpha(&self) -> f64 {
        db_to_linear(self.alpha_db)
    }

    pub fn weight(&self) -> f64 {
        db_to_linear(self.weight_db)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Degenerate,
    MaxIter,
    Infeasible,
    Unbounded,
    Failed,
}

impl SolveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Degenerate => "degenerate",
            SolveStatus::MaxIter => "max_iter",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Unbounded => "unbounded",
            SolveStatus::Failed => "failed",
        }
    }
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-electrode currents with solver bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurrentPattern {
    /// Currents (A), dose-equalized when `status` is optimal.
    pub y: Vec<f64>,
    pub electrode_ids: Vec<u32>,
    pub status: SolveStatus,
    /// Objective of the unscaled minimizer.
    pub raw_objective: f64,
    pub iterations: usize,
    /// Solver-specific final residual or gap.
    pub residual: f64,
}

impl CurrentPattern {
    /// Ids of electrodes with nonzero current.
    pub fn active_montage(&self) -> Vec<u32> {
        self.electrode_ids
            .iter()
            .zip(&self.y)
            .filter(|(_, &v)| v != 0.0)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn is_valid(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    pub fn max_current(&self) -> f64 {
        self.y.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Removes the residual current imbalance, then rescales to `‖y‖₁ = μ`, or marks the
    /// pattern degenerate when `‖y‖₁ < 1e-12·μ`.
    pub(crate) fn finish(mut y: Vec<f64>, p: &StimulusProblem, raw_objective: f64, iterations: usize, residual: f64) -> Self {
        // spread the imbalance over the active channels so exact zeros stay
        let active = y.iter().filter(|v| **v != 0.0).count();
        if active > 0 {
            let mean = y.iter().sum::<f64>() / active as f64;
            for v in y.iter_mut().filter(|v| **v != 0.0) {
                *v -= mean;
            }
        }
        let l1: f64 = y.iter().map(|v| v.abs()).sum();
        let (y, status) = if l1 < 1e-12 * p.mu {
            (y, SolveStatus::Degenerate)
        } else {
            match equalize_dose(&y, p.mu) {
                Some(scaled) => (scaled, SolveStatus::Optimal),
                None => (y, SolveStatus::Degenerate),
            }
        };
        Self {
            y,
            electrode_ids: p.electrode_ids.clone(),
            status,
            raw_objective,
            iterations,
            residual,
        }
    }

    pub(crate) fn failed(y: Vec<f64>, p: &StimulusProblem, status: SolveStatus, raw_objective: f64, iterations: usize, residual: f64) -> Self {
        Self {
            y,
            electrode_ids: p.electrode_ids.clone(),
            status,
            raw_objective,
            iterations,
            residual,
        }
    }
}

/// Rescales `y` to total dose `μ`. Returns `None` when `‖y‖₁` is zero or
/// not finite.
pub fn equalize_dose(y: &[f64], mu: f64) -> Option<Vec<f64>> {
    let l1: f64 = y.iter().map(|v| v.abs()).sum();
    if !(l1 > 0.0 && l1.is_finite()) {
        return None;
    }
    let s = mu / l1;
    Some(y.iter().map(|v| v * s).collect())
}

/// Solver controls shared by the three methods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub lp_tol: f64,
    pub lp_max_iter: usize,
    pub l1l2: L1l2Options,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            lp_tol: crate::lp::DEFAULT_TOL,
            lp_max_iter: crate::lp::DEFAULT_MAX_ITER,
            l1l2: L1l2Options::default(),
        }
    }
}

pub fn solve(method: Method, p: &StimulusProblem, params: MethodParams, opts: &SolverOptions) -> CurrentPattern {
    match method {
        Method::L1l1 => solve_l1l1_with(p, params, opts.lp_tol, opts.lp_max_iter),
        Method::L1l2 => solve_l1l2_with(p, params, &opts.l1l2),
        Method::Tls => solve_tls(p, params).unwrap_or_else(|_| {
            CurrentPattern::failed(vec![0.0; p.n_electrodes()], p, SolveStatus::Failed, f64::NAN, 0, f64::NAN)
        }),
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random problem whose lead-field columns sum to zero per row, like a
    /// real lead field.
    pub fn random_problem(seed: u64, l: usize, m: usize) -> StimulusProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut full = DMatrix::from_fn(3 + m, l, |_, _| rng.random_range(-1.0..1.0));
        for mut row in full.row_iter_mut() {
            let mean = row.mean();
            row.add_scalar_mut(-mean);
        }
        let l1 = full.rows(0, 3).into_owned();
        let l2 = full.rows(3, m).into_owned();
        let dir = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)).normalize();
        let x1 = dir * 0.2;
        let zeta = full.column_iter().map(|c| c.abs().sum()).fold(0.0, f64::max);
        let sigma = full.singular_values().max();
        let nu = x1.amax();
        StimulusProblem::new(l1, l2, x1, 4e-3, 2e-3, zeta, nu, sigma, (1..=l as u32).collect()).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decibels() {
        assert_eq!(db_to_linear(0.0), 1.0);
        assert!((db_to_linear(20.0) - 10.0).abs() < 1e-14);
        assert!((db_to_linear(-160.0) - 1e-8).abs() < 1e-22);
    }

    #[test]
    fn equalize_examples() {
        let y = equalize_dose(&[1e-3, -1e-3], 4e-3).unwrap();
        assert!((y[0] - 2e-3).abs() < 1e-18 && (y[1] + 2e-3).abs() < 1e-18);
        let y = equalize_dose(&[3e-3, -1e-3, -2e-3], 4e-3).unwrap();
        let want = [2e-3, -2e-3 / 3.0, -4e-3 / 3.0];
        for (a, b) in y.iter().zip(want) {
            assert!((a - b).abs() < 1e-18);
        }
        assert_eq!(equalize_dose(&[0.0, 0.0], 4e-3), None);
    }

    #[test]
    fn gamma_must_be_half_mu() {
        let l1 = DMatrix::from_element(3, 2, 1.0);
        let l2 = DMatrix::from_element(3, 2, 1.0);
        let x1 = DVector::from_element(3, 0.1);
        let err = StimulusProblem::new(l1, l2, x1, 4e-3, 1e-3, 1.0, 0.1, 1.0, vec![1, 2]).unwrap_err();
        assert!(matches!(err, OptimError::InvalidProblem(_)));
    }

    #[test]
    fn restriction_keeps_scales() {
        let p = testutil::random_problem(3, 5, 6);
        let r = p.restrict(&[0, 3]).unwrap();
        assert_eq!(r.electrode_ids, vec![1, 4]);
        assert_eq!((r.zeta, r.nu, r.sigma_scale), (p.zeta, p.nu, p.sigma_scale));
        assert_eq!(r.l2.column(1), p.l2.column(3));
    }

    #[test]
    fn compressed_nuisance_preserves_norms() {
        let p = testutil::random_problem(4, 6, 20);
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5, 0.0, 0.3, 0.2]);
        let a = (&p.l2 * &y).norm();
        let b = (p.l2_compressed() * &y).norm();
        assert!((a - b).abs() < 1e-12 * a);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("simplex".parse::<Method>().is_err());
    }
}
