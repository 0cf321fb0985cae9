//! Primal-dual interior-point method for linear programs
//!
//! ```text
//! minimize    cᵀv
//! subject to  G v + s = h,  s ⪰ 0
//!             E v = f
//! ```
//!
//! Mehrotra predictor-corrector iterations on the reduced KKT system
//! `[GᵀDG + ρI, Eᵀ; E, −ρI]` with `D = Z S⁻¹`, factored by a sparse
//! quasi-definite LDLᵀ. The ordering is computed once per problem: AMD on
//! the normal-matrix block, with the equality rows eliminated last.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sparse::{CscMatrix, SymbolicFactor, SymmetricFactor};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 200;

const STEP_FRACTION: f64 = 0.99;
const STATIC_REG: f64 = 1e-12;
const MAX_REFINEMENT_STEPS: usize = 10;
// pivots of the equilibrated KKT matrix below DYNAMIC_EPS (or of the wrong
// sign) are replaced by ±DYNAMIC_DELTA
const DYNAMIC_EPS: f64 = 1e-13;
const DYNAMIC_DELTA: f64 = 1e-7;
const RUIZ_PASSES: usize = 15;

#[derive(Debug, Error, PartialEq)]
pub enum LpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("a linear program needs at least one inequality row")]
    NoInequalities,
    #[error("tolerance must be positive, got {0}")]
    Tolerance(f64),
}

#[derive(Debug, Clone)]
pub struct LinearProgram {
    pub c: Vec<f64>,
    pub g: CscMatrix,
    pub h: Vec<f64>,
    pub e: CscMatrix,
    pub f: Vec<f64>,
}

impl LinearProgram {
    pub fn new(c: Vec<f64>, g: CscMatrix, h: Vec<f64>, e: CscMatrix, f: Vec<f64>) -> Result<Self, LpError> {
        let lp = Self { c, g, h, e, f };
        lp.validate()?;
        Ok(lp)
    }

    /// A program without equality constraints.
    pub fn inequality(c: Vec<f64>, g: CscMatrix, h: Vec<f64>) -> Result<Self, LpError> {
        let n = c.len();
        Self::new(c, g, h, CscMatrix::zeros(0, n), Vec::new())
    }

    pub fn n_vars(&self) -> usize {
        self.c.len()
    }

    pub fn n_ineq(&self) -> usize {
        self.h.len()
    }

    pub fn n_eq(&self) -> usize {
        self.f.len()
    }

    pub fn validate(&self) -> Result<(), LpError> {
        let n = self.c.len();
        if self.h.is_empty() {
            return Err(LpError::NoInequalities);
        }
        if self.g.ncols != n || self.g.nrows != self.h.len() {
            return Err(LpError::Dimension(format!(
                "G is {}×{}, expected {}×{n}",
                self.g.nrows,
                self.g.ncols,
                self.h.len()
            )));
        }
        if self.e.ncols != n || self.e.nrows != self.f.len() {
            return Err(LpError::Dimension(format!(
                "E is {}×{}, expected {}×{n}",
                self.e.nrows,
                self.e.ncols,
                self.f.len()
            )));
        }
        Ok(())
    }

    pub fn objective(&self, v: &[f64]) -> f64 {
        dot(&self.c, v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIter,
}

impl fmt::Display for LpStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LpStatus::Optimal => "optimal",
            LpStatus::Infeasible => "infeasible",
            LpStatus::Unbounded => "unbounded",
            LpStatus::MaxIter => "max_iter",
        })
    }
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub v: Vec<f64>,
    /// Slacks `h − Gv`.
    pub s: Vec<f64>,
    /// Inequality multipliers.
    pub z: Vec<f64>,
    /// Equality multipliers.
    pub y: Vec<f64>,
    pub status: LpStatus,
    pub iterations: usize,
    /// `max(‖Gv+s−h‖∞/(1+‖h‖∞), ‖Ev−f‖∞/(1+‖f‖∞))`.
    pub primal_residual: f64,
    /// `‖Gᵀz+Eᵀy+c‖∞/(1+‖c‖∞)`.
    pub dual_residual: f64,
    /// `sᵀz/(1+|cᵀv|)`.
    pub gap: f64,
    pub objective: f64,
    /// Complementarity measure `sᵀz/m` of each accepted iterate, in the
    /// equilibrated problem.
    pub mu_history: Vec<f64>,
    pub message: Option<String>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Row-access copy of a CSC matrix plus helpers for `GᵀDG`.
struct NormalMatrix {
    /// `Gᵀ` in CSC, i.e. the rows of `G`.
    rows: CscMatrix,
    /// Lower-triangle pattern of `GᵀG`.
    pattern: CscMatrix,
}

impl NormalMatrix {
    fn new(g: &CscMatrix) -> Self {
        let rows = g.transpose();
        let n = g.ncols;
        let mut mark = vec![usize::MAX; n];
        let mut col_ptr = vec![0usize; n + 1];
        let mut row_idx = Vec::new();
        for j in 0..n {
            let start = row_idx.len();
            mark[j] = j;
            row_idx.push(j);
            for (k, _) in g.column(j) {
                for (i, _) in rows.column(k) {
                    if i > j && mark[i] != j {
                        mark[i] = j;
                        row_idx.push(i);
                    }
                }
            }
            row_idx[start..].sort_unstable();
            col_ptr[j + 1] = row_idx.len();
        }
        let values = vec![0.0; row_idx.len()];
        let pattern = CscMatrix {
            nrows: n,
            ncols: n,
            col_ptr,
            row_idx,
            values,
        };
        Self { rows, pattern }
    }

    /// Lower triangle of `GᵀDG` on the fixed pattern, with `shift` added to
    /// the diagonal.
    fn assemble(&self, g: &CscMatrix, d: &[f64], shift: f64, work: &mut [f64]) -> Vec<f64> {
        let n = g.ncols;
        let mut values = vec![0.0; self.pattern.nnz()];
        for j in 0..n {
            for (k, gkj) in g.column(j) {
                let w = d[k] * gkj;
                for (i, gki) in self.rows.column(k) {
                    if i >= j {
                        work[i] += w * gki;
                    }
                }
            }
            let range = self.pattern.col_ptr[j]..self.pattern.col_ptr[j + 1];
            for p in range {
                let i = self.pattern.row_idx[p];
                values[p] = work[i];
                work[i] = 0.0;
            }
            values[self.pattern.col_ptr[j]] += shift;
        }
        values
    }
}

/// Reduced KKT matrix `[H, Eᵀ; E, −ρI]` in lower CSC form, with a fixed
/// pattern and the position of every `H` entry recorded.
struct KktPattern {
    lower: CscMatrix,
    /// Index in `lower.values` of each entry of the `GᵀG` pattern.
    h_pos: Vec<usize>,
    symbolic: SymbolicFactor,
    signs: Vec<i8>,
}

impl KktPattern {
    fn new(normal: &NormalMatrix, e: &CscMatrix) -> Result<Self, String> {
        let n = normal.pattern.ncols;
        let p = e.nrows;
        let mut trip = Vec::with_capacity(normal.pattern.nnz() + e.nnz() + p);
        for j in 0..n {
            for (i, _) in normal.pattern.column(j) {
                trip.push((i, j, 1.0));
            }
            for (r, v) in e.column(j) {
                trip.push((n + r, j, v));
            }
        }
        for r in 0..p {
            trip.push((n + r, n + r, -STATIC_REG));
        }
        let lower = CscMatrix::from_triplets(n + p, n + p, &trip);
        let mut h_pos = Vec::with_capacity(normal.pattern.nnz());
        for j in 0..n {
            for (i, _) in normal.pattern.column(j) {
                h_pos.push(lower.position(i, j).expect("pattern entry"));
            }
        }
        let symbolic = SymbolicFactor::analyze_with_trailing(&lower, p).map_err(|e| e.to_string())?;
        let mut signs = vec![1i8; n];
        signs.extend(std::iter::repeat(-1i8).take(p));
        Ok(Self {
            lower,
            h_pos,
            symbolic,
            signs,
        })
    }
}

/// Equilibrated problem data and the factorization machinery.
struct Workspace<'a> {
    lp: &'a LinearProgram,
    g: CscMatrix,
    e: CscMatrix,
    c: Vec<f64>,
    h: Vec<f64>,
    f: Vec<f64>,
    row_g: Vec<f64>,
    row_e: Vec<f64>,
    col: Vec<f64>,
    cost_scale: f64,
    normal: NormalMatrix,
    kkt: KktPattern,
    work: Vec<f64>,
}

/// Current factorization of the reduced system for a given `D`.
struct Factored {
    factor: SymmetricFactor,
    d: Vec<f64>,
}

fn scale_rows_cols(m: &CscMatrix, row: &[f64], col: &[f64]) -> CscMatrix {
    let mut out = m.clone();
    for j in 0..m.ncols {
        for p in m.col_ptr[j]..m.col_ptr[j + 1] {
            out.values[p] *= row[m.row_idx[p]] * col[j];
        }
    }
    out
}

impl<'a> Workspace<'a> {
    fn new(lp: &'a LinearProgram) -> Result<Self, String> {
        let n = lp.n_vars();
        let m = lp.n_ineq();
        let p = lp.n_eq();
        let mut row_g = vec![1.0; m];
        let mut row_e = vec![1.0; p];
        let mut col = vec![1.0; n];
        let mut g = lp.g.clone();
        let mut e = lp.e.clone();
        for _ in 0..RUIZ_PASSES {
            let mut rg = vec![0.0f64; m];
            let mut re = vec![0.0f64; p];
            let mut cn = vec![0.0f64; n];
            for j in 0..n {
                for (i, v) in g.column(j) {
                    rg[i] = rg[i].max(v.abs());
                    cn[j] = cn[j].max(v.abs());
                }
                for (i, v) in e.column(j) {
                    re[i] = re[i].max(v.abs());
                    cn[j] = cn[j].max(v.abs());
                }
            }
            let inv_sqrt = |v: f64| if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 };
            let rg: Vec<f64> = rg.into_iter().map(inv_sqrt).collect();
            let re: Vec<f64> = re.into_iter().map(inv_sqrt).collect();
            let cn: Vec<f64> = cn.into_iter().map(inv_sqrt).collect();
            g = scale_rows_cols(&g, &rg, &cn);
            e = scale_rows_cols(&e, &re, &cn);
            for (a, b) in row_g.iter_mut().zip(&rg) {
                *a *= b;
            }
            for (a, b) in row_e.iter_mut().zip(&re) {
                *a *= b;
            }
            for (a, b) in col.iter_mut().zip(&cn) {
                *a *= b;
            }
        }
        let mut c: Vec<f64> = lp.c.iter().zip(&col).map(|(a, b)| a * b).collect();
        let cmax = inf_norm(&c);
        let cost_scale = if cmax > 0.0 { cmax } else { 1.0 };
        for v in &mut c {
            *v /= cost_scale;
        }
        let h = lp.h.iter().zip(&row_g).map(|(a, b)| a * b).collect();
        let f = lp.f.iter().zip(&row_e).map(|(a, b)| a * b).collect();
        let normal = NormalMatrix::new(&g);
        let kkt = KktPattern::new(&normal, &e)?;
        Ok(Self {
            lp,
            g,
            e,
            c,
            h,
            f,
            row_g,
            row_e,
            col,
            cost_scale,
            normal,
            kkt,
            work: vec![0.0; n],
        })
    }

    fn n(&self) -> usize {
        self.c.len()
    }

    fn factor(&mut self, d: &[f64]) -> Result<Factored, String> {
        let hv = self.normal.assemble(&self.g, d, STATIC_REG, &mut self.work);
        let mut lower = self.kkt.lower.clone();
        for (v, &pos) in hv.iter().zip(&self.kkt.h_pos) {
            lower.values[pos] = *v;
        }
        let (factor, _) = SymmetricFactor::ldlt_with(&self.kkt.symbolic, &lower, &self.kkt.signs, DYNAMIC_DELTA, DYNAMIC_EPS)
        .map_err(|e| format!("KKT factorization failed: {e}"))?;
        Ok(Factored {
            factor,
            d: d.to_vec(),
        })
    }

    /// Solves
    /// ```text
    /// Gᵀdz + Eᵀdy        = bx
    /// E dx               = by
    /// G dx − D⁻¹dz       = bz
    /// ```
    /// with iterative refinement on the unreduced system.
    fn solve(&self, fac: &Factored, bx: &[f64], by: &[f64], bz: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.n();
        let m = bz.len();
        let mut dx = vec![0.0; n];
        let mut dy = vec![0.0; by.len()];
        let mut dz = vec![0.0; m];
        let (mut rx, mut ry, mut rz) = (bx.to_vec(), by.to_vec(), bz.to_vec());
        let b_norm = inf_norm(bx).max(inf_norm(by)).max(inf_norm(bz));
        let mut r_norm = f64::INFINITY;
        for _ in 0..=MAX_REFINEMENT_STEPS {
            let (cx, cy, cz) = self.reduced_solve(fac, &rx, &ry, &rz);
            let mut tx = dx.clone();
            let mut ty = dy.clone();
            let mut tz = dz.clone();
            for (a, b) in tx.iter_mut().zip(&cx) {
                *a += b;
            }
            for (a, b) in ty.iter_mut().zip(&cy) {
                *a += b;
            }
            for (a, b) in tz.iter_mut().zip(&cz) {
                *a += b;
            }
            let gtz = self.g.tr_mul_vec(&tz);
            let ety = self.e.tr_mul_vec(&ty);
            let ex = self.e.mul_vec(&tx);
            let gx = self.g.mul_vec(&tx);
            let nx: Vec<f64> = (0..n).map(|i| bx[i] - gtz[i] - ety[i]).collect();
            let ny: Vec<f64> = (0..by.len()).map(|i| by[i] - ex[i]).collect();
            let nz: Vec<f64> = (0..m).map(|i| bz[i] - (gx[i] - tz[i] / fac.d[i])).collect();
            let norm = inf_norm(&nx).max(inf_norm(&ny)).max(inf_norm(&nz));
            // keep the best correction; stop once refinement stalls
            if !(norm < r_norm) {
                break;
            }
            let stalled = norm > 0.5 * r_norm;
            (dx, dy, dz) = (tx, ty, tz);
            (rx, ry, rz) = (nx, ny, nz);
            r_norm = norm;
            if stalled || norm <= 1e-15 * (1.0 + b_norm) {
                break;
            }
        }
        (dx, dy, dz)
    }

    fn reduced_solve(&self, fac: &Factored, bx: &[f64], by: &[f64], bz: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.n();
        let dbz: Vec<f64> = bz.iter().zip(&fac.d).map(|(b, d)| b * d).collect();
        let gt = self.g.tr_mul_vec(&dbz);
        let mut rhs: Vec<f64> = bx.iter().zip(&gt).map(|(a, b)| a + b).collect();
        rhs.extend_from_slice(by);
        fac.factor.solve_in_place(&mut rhs);
        let dy = rhs.split_off(n);
        let dx = rhs;
        let gx = self.g.mul_vec(&dx);
        let dz = gx
            .iter()
            .zip(bz)
            .zip(&fac.d)
            .map(|((g, b), d)| d * (g - b))
            .collect();
        (dx, dy, dz)
    }
}

fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    let mut a = f64::INFINITY;
    for (x, d) in v.iter().zip(dv) {
        if *d < 0.0 {
            a = a.min(-x / d);
        }
    }
    a
}

/// Residuals of an iterate mapped back to the original problem.
struct Residuals {
    primal: f64,
    dual: f64,
    gap: f64,
    objective: f64,
}

/// Solves the program to relative tolerance `tol`.
pub fn solve_lp(lp: &LinearProgram, tol: f64, max_iter: usize) -> Result<LpSolution, LpError> {
    lp.validate()?;
    if !(tol > 0.0) {
        return Err(LpError::Tolerance(tol));
    }
    let mut ws = match Workspace::new(lp) {
        Ok(ws) => ws,
        Err(msg) => return Ok(failed(lp, msg)),
    };
    let n = ws.n();
    let m = lp.n_ineq();
    let p = lp.n_eq();

    // starting point: least-squares primal slack and least-norm dual
    let ones = vec![1.0; m];
    let fac = match ws.factor(&ones) {
        Ok(f) => f,
        Err(msg) => return Ok(failed(lp, msg)),
    };
    let (mut x, _, neg_s) = ws.solve(&fac, &vec![0.0; n], &ws.f.clone(), &ws.h.clone());
    let mut s: Vec<f64> = neg_s.iter().map(|v| -v).collect();
    let neg_c: Vec<f64> = ws.c.iter().map(|v| -v).collect();
    let (_, mut y, mut z) = ws.solve(&fac, &neg_c, &vec![0.0; p], &vec![0.0; m]);
    for v in [&mut s, &mut z] {
        let worst = v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(-b));
        if worst >= -1e-8 {
            let shift = 1.0 + worst.max(0.0);
            for e in v.iter_mut() {
                *e += shift;
            }
        }
    }

    // homogeneous embedding: Gx + s = hτ, Ex = fτ, Gᵀz + Eᵀy + cτ = 0,
    // κ = −cᵀx − fᵀy − hᵀz
    let mut tau = 1.0f64;
    let mut kappa = 1.0f64;
    let mut mu_history = Vec::new();
    let mut message = None;
    let mut status = LpStatus::MaxIter;
    let mut iterations = 0;
    let h_norm = inf_norm(&ws.h).max(1.0);
    let c_norm = inf_norm(&ws.c).max(1.0);
    let cert_tol = tol.max(1e-9);
    let scaled = |v: &[f64], t: f64| v.iter().map(|e| e / t).collect::<Vec<f64>>();

    loop {
        let mu = (dot(&s, &z) + tau * kappa) / (m + 1) as f64;
        mu_history.push(mu);

        let gx = ws.g.mul_vec(&x);
        let ex = ws.e.mul_vec(&x);
        let gtz = ws.g.tr_mul_vec(&z);
        let ety = ws.e.tr_mul_vec(&y);
        let rx: Vec<f64> = (0..n).map(|i| gtz[i] + ety[i] + ws.c[i] * tau).collect();
        let ry: Vec<f64> = (0..p).map(|i| ex[i] - ws.f[i] * tau).collect();
        let rz: Vec<f64> = (0..m).map(|i| gx[i] + s[i] - ws.h[i] * tau).collect();
        let cx = dot(&ws.c, &x);
        let hz = dot(&ws.h, &z) + dot(&ws.f, &y);
        let rt = kappa + cx + hz;

        let res = original_residuals(&ws, &scaled(&x, tau), &scaled(&s, tau), &scaled(&z, tau), &scaled(&y, tau));
        if res.primal <= tol && res.dual <= tol && res.gap <= tol {
            status = LpStatus::Optimal;
            break;
        }
        // Farkas certificates of primal and dual infeasibility
        if hz < 0.0 {
            let gz_ey: Vec<f64> = (0..n).map(|i| gtz[i] + ety[i]).collect();
            if inf_norm(&gz_ey) / -hz <= cert_tol * c_norm {
                status = LpStatus::Infeasible;
                break;
            }
        }
        if cx < 0.0 {
            let gs: Vec<f64> = (0..m).map(|i| gx[i] + s[i]).collect();
            if inf_norm(&gs).max(inf_norm(&ex)) / -cx <= cert_tol * h_norm {
                status = LpStatus::Unbounded;
                break;
            }
        }
        if iterations >= max_iter {
            break;
        }
        if !mu.is_finite() {
            message = Some("iterates diverged".into());
            break;
        }

        let d: Vec<f64> = (0..m).map(|i| z[i] / s[i]).collect();
        let fac = match ws.factor(&d) {
            Ok(f) => f,
            Err(msg) => {
                message = Some(msg);
                break;
            }
        };
        let (u2x, u2y, u2z) = ws.solve(
            &fac,
            &ws.c.iter().map(|v| -v).collect::<Vec<_>>(),
            &ws.f,
            &ws.h,
        );
        // cᵀu + fᵀu + hᵀu reduces to −u_zᵀD⁻¹u_z; this form keeps the sign
        let p2 = -(0..m).map(|i| u2z[i] * u2z[i] / d[i]).sum::<f64>();

        // Newton direction for residual reduction η and complementarity
        // right-hand sides (rs, rk)
        let direction = |eta: f64, rs: &[f64], rk: f64| {
            let bx: Vec<f64> = rx.iter().map(|v| -eta * v).collect();
            let by: Vec<f64> = ry.iter().map(|v| -eta * v).collect();
            let bz: Vec<f64> = (0..m).map(|i| -eta * rz[i] + rs[i] / z[i]).collect();
            let (ux, uy, uz) = ws.solve(&fac, &bx, &by, &bz);
            let p1 = dot(&ws.c, &ux) + dot(&ws.f, &uy) + dot(&ws.h, &uz);
            let dtau = (p1 + eta * rt - rk / tau) / (kappa / tau - p2);
            let dx: Vec<f64> = (0..n).map(|i| ux[i] + dtau * u2x[i]).collect();
            let dy: Vec<f64> = (0..p).map(|i| uy[i] + dtau * u2y[i]).collect();
            let dz: Vec<f64> = (0..m).map(|i| uz[i] + dtau * u2z[i]).collect();
            let ds: Vec<f64> = (0..m).map(|i| -(rs[i] + s[i] * dz[i]) / z[i]).collect();
            let dkappa = -(rk + kappa * dtau) / tau;
            (dx, dy, dz, ds, dtau, dkappa)
        };
        let max_alpha = |dz: &[f64], ds: &[f64], dtau: f64, dkappa: f64| {
            let mut a = max_step(&s, ds).min(max_step(&z, dz));
            if dtau < 0.0 {
                a = a.min(-tau / dtau);
            }
            if dkappa < 0.0 {
                a = a.min(-kappa / dkappa);
            }
            a
        };
        let mu_at = |a: f64, dz: &[f64], ds: &[f64], dtau: f64, dkappa: f64| {
            ((0..m).map(|i| (s[i] + a * ds[i]) * (z[i] + a * dz[i])).sum::<f64>()
                + (tau + a * dtau) * (kappa + a * dkappa))
                / (m + 1) as f64
        };

        // predictor
        let rs: Vec<f64> = (0..m).map(|i| s[i] * z[i]).collect();
        let (_, _, dz_a, ds_a, dtau_a, dkappa_a) = direction(1.0, &rs, tau * kappa);
        let a_aff = max_alpha(&dz_a, &ds_a, dtau_a, dkappa_a).min(1.0);
        let sigma = (mu_at(a_aff, &dz_a, &ds_a, dtau_a, dkappa_a) / mu).clamp(0.0, 1.0).powi(3);

        // corrector
        let rs: Vec<f64> = (0..m).map(|i| s[i] * z[i] + ds_a[i] * dz_a[i] - sigma * mu).collect();
        let rk = tau * kappa + dtau_a * dkappa_a - sigma * mu;
        let (dx, dy, dz, ds, dtau, dkappa) = direction(1.0 - sigma, &rs, rk);
        let mut alpha = (STEP_FRACTION * max_alpha(&dz, &ds, dtau, dkappa)).min(1.0);

        // keep the complementarity measure from increasing
        for _ in 0..40 {
            if mu_at(alpha, &dz, &ds, dtau, dkappa) <= mu {
                break;
            }
            alpha *= 0.5;
        }
        if alpha < 1e-14 {
            message = Some("step length vanished".into());
            break;
        }
        for i in 0..n {
            x[i] += alpha * dx[i];
        }
        for i in 0..p {
            y[i] += alpha * dy[i];
        }
        for i in 0..m {
            s[i] += alpha * ds[i];
            z[i] += alpha * dz[i];
        }
        tau += alpha * dtau;
        kappa += alpha * dkappa;
        iterations += 1;
    }

    // certificates are reported unnormalized, solutions divided by τ
    let t = if status == LpStatus::Infeasible || status == LpStatus::Unbounded { 1.0 } else { tau };
    let (x, s, z, y) = (scaled(&x, t), scaled(&s, t), scaled(&z, t), scaled(&y, t));
    let res = original_residuals(&ws, &x, &s, &z, &y);
    let (v, s, z, y) = unscale(&ws, &x, &s, &z, &y);
    Ok(LpSolution {
        v,
        s,
        z,
        y,
        status,
        iterations,
        primal_residual: res.primal,
        dual_residual: res.dual,
        gap: res.gap,
        objective: res.objective,
        mu_history,
        message,
    })
}

fn failed(lp: &LinearProgram, msg: String) -> LpSolution {
    LpSolution {
        v: vec![0.0; lp.n_vars()],
        s: lp.h.clone(),
        z: vec![0.0; lp.n_ineq()],
        y: vec![0.0; lp.n_eq()],
        status: LpStatus::MaxIter,
        iterations: 0,
        primal_residual: f64::INFINITY,
        dual_residual: f64::INFINITY,
        gap: f64::INFINITY,
        objective: f64::NAN,
        mu_history: Vec::new(),
        message: Some(msg),
    }
}

fn unscale(ws: &Workspace, x: &[f64], s: &[f64], z: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let v = x.iter().zip(&ws.col).map(|(a, b)| a * b).collect();
    let s = s.iter().zip(&ws.row_g).map(|(a, b)| a / b).collect();
    let z = z.iter().zip(&ws.row_g).map(|(a, b)| a * b * ws.cost_scale).collect();
    let y = y.iter().zip(&ws.row_e).map(|(a, b)| a * b * ws.cost_scale).collect();
    (v, s, z, y)
}

fn original_residuals(ws: &Workspace, x: &[f64], s: &[f64], z: &[f64], y: &[f64]) -> Residuals {
    let lp = ws.lp;
    let (v, s, z, y) = unscale(ws, x, s, z, y);
    let gv = lp.g.mul_vec(&v);
    let rp = (0..lp.n_ineq())
        .map(|i| (gv[i] + s[i] - lp.h[i]).abs())
        .fold(0.0, f64::max)
        / (1.0 + inf_norm(&lp.h));
    let ev = lp.e.mul_vec(&v);
    let re = (0..lp.n_eq())
        .map(|i| (ev[i] - lp.f[i]).abs())
        .fold(0.0, f64::max)
        / (1.0 + inf_norm(&lp.f));
    let gtz = lp.g.tr_mul_vec(&z);
    let ety = lp.e.tr_mul_vec(&y);
    let rd = (0..lp.n_vars())
        .map(|i| (gtz[i] + ety[i] + lp.c[i]).abs())
        .fold(0.0, f64::max)
        / (1.0 + inf_norm(&lp.c));
    let objective = lp.objective(&v);
    Residuals {
        primal: rp.max(re),
        dual: rd,
        gap: dot(&s, &z).abs() / (1.0 + objective.abs()),
        objective,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(rows: &[&[f64]]) -> CscMatrix {
        let mut t = Vec::new();
        for (i, r) in rows.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                if v != 0.0 {
                    t.push((i, j, v));
                }
            }
        }
        CscMatrix::from_triplets(rows.len(), rows.first().map_or(0, |r| r.len()), &t)
    }

    #[test]
    fn single_lower_bound() {
        let lp = LinearProgram::inequality(vec![1.0], dense(&[&[-1.0]]), vec![-1.0]).unwrap();
        let sol = solve_lp(&lp, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert!((sol.v[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn clipped_square() {
        let g = dense(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0], &[-1.0, 0.0], &[0.0, -1.0]]);
        let lp = LinearProgram::inequality(vec![-1.0, -1.0], g, vec![1.0, 1.0, 1.5, 0.0, 0.0]).unwrap();
        let sol = solve_lp(&lp, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert!((sol.objective + 1.5).abs() < 1e-8);
    }

    #[test]
    fn empty_interval_is_infeasible() {
        let lp = LinearProgram::inequality(vec![1.0], dense(&[&[1.0], &[-1.0]]), vec![0.0, -1.0]).unwrap();
        let sol = solve_lp(&lp, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(sol.status, LpStatus::Infeasible);
    }

    #[test]
    fn half_line_is_unbounded() {
        let lp = LinearProgram::inequality(vec![-1.0], dense(&[&[-1.0]]), vec![0.0]).unwrap();
        let sol = solve_lp(&lp, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(sol.status, LpStatus::Unbounded);
    }

    #[test]
    fn equality_constraint() {
        // min x + 2y s.t. x + y = 1, x, y ≥ 0
        let lp = LinearProgram::new(
            vec![1.0, 2.0],
            dense(&[&[-1.0, 0.0], &[0.0, -1.0]]),
            vec![0.0, 0.0],
            dense(&[&[1.0, 1.0]]),
            vec![1.0],
        )
        .unwrap();
        let sol = solve_lp(&lp, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert!((sol.v[0] - 1.0).abs() < 1e-8 && sol.v[1].abs() < 1e-8);
        assert!((sol.y[0] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn degenerate_face_with_equality() {
        // optimal set is a face; the equality row must not be pivoted early
        let g = dense(&[
            &[-2.0, -4.0, 1.0, 2.0, 2.0],
            &[0.0, 0.0, 4.0, -3.0, 0.0],
            &[-4.0, 3.0, 1.0, -1.0, 3.0],
            &[-3.0, -4.0, 1.0, -4.0, -4.0],
            &[4.0, -3.0, 2.0, -4.0, 2.0],
        ]);
        let e = dense(&[&[0.0, -3.0, 3.0, -2.0, -2.0]]);
        let lp = LinearProgram::new(
            vec![4.0, -3.0, -4.0, 6.0, -8.0],
            g,
            vec![7.0, -7.0, -17.0, -13.0, 10.0],
            e,
            vec![-3.0],
        )
        .unwrap();
        let sol = solve_lp(&lp, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal, "{:?}", sol.message);
        assert!((sol.objective - 24.0).abs() < 1e-7, "{}", sol.objective);
    }

    #[test]
    fn rejects_bad_dimensions() {
        let err = LinearProgram::inequality(vec![1.0, 1.0], dense(&[&[1.0]]), vec![1.0]).unwrap_err();
        assert!(matches!(err, LpError::Dimension(_)));
        let lp = LinearProgram::inequality(vec![1.0], dense(&[&[-1.0]]), vec![-1.0]).unwrap();
        assert_eq!(solve_lp(&lp, 0.0, 10).unwrap_err(), LpError::Tolerance(0.0));
    }

    #[test]
    fn complementarity_never_increases() {
        let g = dense(&[&[1.0, 2.0], &[3.0, -1.0], &[-1.0, 0.0], &[0.0, -1.0], &[1.0, 1.0]]);
        let lp = LinearProgram::inequality(vec![-2.0, -3.0], g, vec![8.0, 9.0, 0.0, 0.0, 5.0]).unwrap();
        let sol = solve_lp(&lp, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        for w in sol.mu_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }
}
