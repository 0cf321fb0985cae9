use nalgebra::DVector;

use super::{CurrentPattern, MethodParams, SolveStatus, StimulusProblem};
use crate::lp::{solve_lp, LinearProgram, LpStatus, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::sparse::CscMatrix;

/// Variable offsets of the L1L1 program `v = (y, t¹, t², t³)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct L1l1Layout {
    pub electrodes: usize,
    pub targets: usize,
    pub nuisance: usize,
}

impl L1l1Layout {
    pub fn of(p: &StimulusProblem) -> Self {
        Self {
            electrodes: p.n_electrodes(),
            targets: p.l1.nrows(),
            nuisance: p.n_nuisance(),
        }
    }

    pub fn y(&self) -> std::ops::Range<usize> {
        0..self.electrodes
    }

    pub fn t1(&self) -> std::ops::Range<usize> {
        let s = self.electrodes;
        s..s + self.targets
    }

    pub fn t2(&self) -> std::ops::Range<usize> {
        let s = self.electrodes + self.targets;
        s..s + self.nuisance
    }

    pub fn t3(&self) -> std::ops::Range<usize> {
        let s = self.electrodes + self.targets + self.nuisance;
        s..s + self.electrodes
    }

    pub fn n_vars(&self) -> usize {
        2 * self.electrodes + self.targets + self.nuisance
    }

    pub fn n_rows(&self) -> usize {
        3 * self.targets + 3 * self.nuisance + 4 * self.electrodes + 1
    }
}

/// L1L1 objective `‖L₁y−x₁‖₁ + Σ max(|L₂y|, εν) + αζ‖y‖₁`.
pub fn l1l1_objective(p: &StimulusProblem, y: &DVector<f64>, alpha: f64, eps: f64) -> f64 {
    let fit: f64 = (&p.l1 * y - &p.x1).abs().sum();
    let floor = eps * p.nu;
    let nuisance: f64 = (&p.l2 * y).iter().map(|v| v.abs().max(floor)).sum();
    fit + nuisance + alpha * p.zeta * y.abs().sum()
}

/// Linear program whose minimizers over `y` are those of the L1L1 problem
/// on the feasible polytope.
///
/// Inequality row blocks, in order:
/// `L₁y−t¹ ≤ x₁`, `L₂y−t² ≤ 0`, `−y−t³ ≤ 0`, `−L₁y−t¹ ≤ −x₁`,
/// `−L₂y−t² ≤ 0`, `y−t³ ≤ 0`, `−t¹ ≤ 0`, `−t² ≤ −εν`, `−t³ ≤ 0`,
/// `t³ ≤ γ`, `1ᵀt³ ≤ μ`; one equality `1ᵀy = 0`.
pub fn build_l1l1_lp(p: &StimulusProblem, alpha: f64, eps: f64) -> LinearProgram {
    let lay = L1l1Layout::of(p);
    let (l, k, m) = (lay.electrodes, lay.targets, lay.nuisance);
    let (oy, o1, o2, o3) = (lay.y().start, lay.t1().start, lay.t2().start, lay.t3().start);
    let mut trip = Vec::with_capacity(2 * (k + m) * (l + 1) + 8 * l + 2 * k + m);
    let mut h = Vec::with_capacity(lay.n_rows());
    let mut row = 0;

    let dense_block = |trip: &mut Vec<_>, row: &mut usize, sign: f64, mat: &nalgebra::DMatrix<f64>, t_off: usize| {
        for i in 0..mat.nrows() {
            for j in 0..l {
                let v = mat[(i, j)];
                if v != 0.0 {
                    trip.push((*row, oy + j, sign * v));
                }
            }
            trip.push((*row, t_off + i, -1.0));
            *row += 1;
        }
    };

    dense_block(&mut trip, &mut row, 1.0, &p.l1, o1);
    h.extend(p.x1.iter());
    dense_block(&mut trip, &mut row, 1.0, &p.l2, o2);
    h.extend(std::iter::repeat(0.0).take(m));
    for j in 0..l {
        trip.push((row, oy + j, -1.0));
        trip.push((row, o3 + j, -1.0));
        row += 1;
    }
    h.extend(std::iter::repeat(0.0).take(l));
    dense_block(&mut trip, &mut row, -1.0, &p.l1, o1);
    h.extend(p.x1.iter().map(|v| -v));
    dense_block(&mut trip, &mut row, -1.0, &p.l2, o2);
    h.extend(std::iter::repeat(0.0).take(m));
    for j in 0..l {
        trip.push((row, oy + j, 1.0));
        trip.push((row, o3 + j, -1.0));
        row += 1;
    }
    h.extend(std::iter::repeat(0.0).take(l));
    for (off, count, bound) in [(o1, k, 0.0), (o2, m, -eps * p.nu), (o3, l, 0.0)] {
        for i in 0..count {
            trip.push((row, off + i, -1.0));
            row += 1;
        }
        h.extend(std::iter::repeat(bound).take(count));
    }
    for j in 0..l {
        trip.push((row, o3 + j, 1.0));
        row += 1;
    }
    h.extend(std::iter::repeat(p.gamma).take(l));
    for j in 0..l {
        trip.push((row, o3 + j, 1.0));
    }
    row += 1;
    h.push(p.mu);
    debug_assert_eq!(row, lay.n_rows());

    let n = lay.n_vars();
    let g = CscMatrix::from_triplets(row, n, &trip);
    let e_trip: Vec<_> = (0..l).map(|j| (0, oy + j, 1.0)).collect();
    let e = CscMatrix::from_triplets(1, n, &e_trip);
    let mut c = vec![0.0; n];
    for i in lay.t1().chain(lay.t2()) {
        c[i] = 1.0;
    }
    for i in lay.t3() {
        c[i] = alpha * p.zeta;
    }
    LinearProgram::new(c, g, h, e, vec![0.0]).expect("consistent L1L1 layout")
}

pub fn solve_l1l1(p: &StimulusProblem, params: MethodParams) -> CurrentPattern {
    solve_l1l1_with(p, params, DEFAULT_TOL, DEFAULT_MAX_ITER)
}

pub fn solve_l1l1_with(p: &StimulusProblem, params: MethodParams, tol: f64, max_iter: usize) -> CurrentPattern {
    let (alpha, eps) = (params.alpha(), params.weight());
    let lp = build_l1l1_lp(p, alpha, eps);
    let lay = L1l1Layout::of(p);
    let sol = match solve_lp(&lp, tol, max_iter) {
        Ok(s) => s,
        Err(_) => {
            return CurrentPattern::failed(vec![0.0; lay.electrodes], p, SolveStatus::Failed, f64::NAN, 0, f64::NAN)
        }
    };
    let y = sol.v[lay.y()].to_vec();
    let residual = sol.primal_residual.max(sol.dual_residual).max(sol.gap);
    match sol.status {
        LpStatus::Optimal => {
            let raw = l1l1_objective(p, &DVector::from_column_slice(&y), alpha, eps);
            CurrentPattern::finish(y, p, raw, sol.iterations, residual)
        }
        other => {
            let status = match other {
                LpStatus::Infeasible => SolveStatus::Infeasible,
                LpStatus::Unbounded => SolveStatus::Unbounded,
                _ => SolveStatus::MaxIter,
            };
            CurrentPattern::failed(y, p, status, sol.objective, sol.iterations, residual)
        }
    }
}
