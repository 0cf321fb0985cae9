use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::fem::spectral_norm;

use super::{CurrentPattern, MethodParams, SolveStatus, StimulusProblem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L1l2Options {
    /// Relative duality-gap tolerance.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for L1l2Options {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 20_000,
        }
    }
}

/// L1L2 objective `‖L₁y−x₁‖₂ + max(‖L₂y‖₂, εν√M) + αζ‖y‖₁`.
pub fn l1l2_objective(p: &StimulusProblem, y: &DVector<f64>, alpha: f64, eps: f64) -> f64 {
    let floor = eps * p.nu * (p.n_nuisance() as f64).sqrt();
    (&p.l1 * y - &p.x1).norm() + (&p.l2 * y).norm().max(floor) + alpha * p.zeta * y.abs().sum()
}

fn project_l1_ball(v: &[f64], radius: f64) -> Vec<f64> {
    let l1: f64 = v.iter().map(|x| x.abs()).sum();
    if l1 <= radius {
        return v.to_vec();
    }
    let mut a: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    a.sort_unstable_by(|x, y| y.total_cmp(x));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &ai) in a.iter().enumerate() {
        cum += ai;
        let t = (cum - radius) / (i + 1) as f64;
        if ai > t {
            theta = t;
        } else {
            break;
        }
    }
    v.iter().map(|x| x.signum() * (x.abs() - theta).max(0.0)).collect()
}

/// Result of projecting onto `{1ᵀy = 0, ‖y‖₁ ≤ μ, |y| ≤ γ}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub y: Vec<f64>,
    pub cycles: usize,
    /// Largest violation of the ball and box constraints.
    pub distance: f64,
}

/// Euclidean projection onto the feasible polytope by Dykstra's cyclic
/// projections over the ℓ1 ball, the box and the zero-sum hyperplane.
pub fn project_feasible(v: &[f64], mu: f64, gamma: f64, max_cycles: usize, tol: f64) -> Projection {
    let n = v.len();
    let mut x = v.to_vec();
    let mut pa = vec![0.0; n];
    let mut pb = vec![0.0; n];
    let mut ph = vec![0.0; n];
    let violation = |x: &[f64]| {
        let l1: f64 = x.iter().map(|e| e.abs()).sum();
        let boxv = x.iter().fold(0.0f64, |m, e| m.max(e.abs() - gamma));
        (l1 - mu).max(boxv).max(0.0)
    };
    let mut cycles = 0;
    let mut distance = violation(&x);
    if distance == 0.0 && x.iter().sum::<f64>() == 0.0 {
        return Projection { y: x, cycles, distance };
    }
    let max_diff = |a: &[f64], b: &[f64]| a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    while cycles < max_cycles {
        let prev = [x.clone(), pa.clone(), pb.clone(), ph.clone()];
        let u: Vec<f64> = (0..n).map(|i| x[i] + pa[i]).collect();
        let a = project_l1_ball(&u, mu);
        for i in 0..n {
            pa[i] = u[i] - a[i];
        }
        let u: Vec<f64> = (0..n).map(|i| a[i] + pb[i]).collect();
        let b: Vec<f64> = u.iter().map(|e| e.clamp(-gamma, gamma)).collect();
        for i in 0..n {
            pb[i] = u[i] - b[i];
        }
        let u: Vec<f64> = (0..n).map(|i| b[i] + ph[i]).collect();
        let mean = u.iter().sum::<f64>() / n as f64;
        for i in 0..n {
            x[i] = u[i] - mean;
            ph[i] = mean;
        }
        cycles += 1;
        distance = violation(&x);
        // the iterate can stall for a cycle while the corrections still move
        let change = [&x, &pa, &pb, &ph]
            .iter()
            .zip(&prev)
            .fold(0.0f64, |m, (cur, old)| m.max(max_diff(cur, old)));
        if distance <= tol * mu && change <= tol * mu {
            break;
        }
    }
    Projection { y: x, cycles, distance }
}

fn project_unit_ball(v: &mut [f64]) {
    let r = v.iter().map(|e| e * e).sum::<f64>().sqrt();
    if r > 1.0 {
        for e in v.iter_mut() {
            *e /= r;
        }
    }
}

fn shrink_clip(x: f64, t: f64, gamma: f64) -> f64 {
    (x.signum() * (x.abs() - t).max(0.0)).clamp(-gamma, gamma)
}

/// `y_i = clip(S_t(v_i − η), ±γ)` with the shift `η` chosen so that
/// `Σ y_i = 0`.
fn balanced_shrink(v: &[f64], t: f64, gamma: f64, bp: &mut Vec<f64>) -> Vec<f64> {
    let f = |eta: f64| v.iter().map(|&x| shrink_clip(x - eta, t, gamma)).sum::<f64>();
    bp.clear();
    for &x in v {
        bp.extend_from_slice(&[x - t - gamma, x - t, x + t, x + t + gamma]);
    }
    bp.sort_unstable_by(f64::total_cmp);
    // f is non-increasing and piecewise linear between breakpoints
    let (mut lo, mut hi) = (0, bp.len() - 1);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if f(bp[mid]) >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (a, b) = (bp[lo], bp[hi]);
    let (fa, fb) = (f(a), f(b));
    let eta = if fa <= 0.0 || fa == fb { a } else if fb >= 0.0 { b } else { a + fa * (b - a) / (fa - fb) };
    v.iter().map(|&x| shrink_clip(x - eta, t, gamma)).collect()
}

/// Proximal map of `t‖·‖₁` plus the indicator of the feasible polytope
/// `{1ᵀy = 0, ‖y‖₁ ≤ μ, |y| ≤ γ}`.
///
/// The optimality conditions give `y_i = clip(S_{t+ρ}(v_i − η), ±γ)` with
/// `η` balancing the currents and `ρ ≥ 0` the multiplier of the ℓ1 ball,
/// found by bisection since `‖y(ρ)‖₁` is non-increasing.
pub fn prox_l1_feasible(v: &[f64], t: f64, mu: f64, gamma: f64) -> Vec<f64> {
    let mut bp = Vec::with_capacity(4 * v.len());
    let y = balanced_shrink(v, t, gamma, &mut bp);
    let norm = |y: &[f64]| y.iter().map(|e| e.abs()).sum::<f64>();
    if norm(&y) <= mu {
        return y;
    }
    let mut lo = 0.0;
    let mut hi = 2.0 * v.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    let mut best = balanced_shrink(v, t + hi, gamma, &mut bp);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let y = balanced_shrink(v, t + mid, gamma, &mut bp);
        if norm(&y) <= mu {
            hi = mid;
            best = y;
        } else {
            lo = mid;
        }
    }
    best
}

pub fn solve_l1l2(p: &StimulusProblem, params: MethodParams) -> CurrentPattern {
    solve_l1l2_with(p, params, &L1l2Options::default())
}

/// Primal-dual hybrid gradient iterations on
/// `min g₁(L₁y) + g₂(Qy) + αζ‖y‖₁` over the feasible polytope, where `Q`
/// is the triangular factor of `L₂`, `g₁ = ‖·−x₁‖₂` and
/// `g₂ = max(‖·‖₂, εν√M)`. The ℓ1 penalty and the constraints enter
/// through the primal proximal step; stopping is on the duality gap.
pub fn solve_l1l2_with(p: &StimulusProblem, params: MethodParams, opts: &L1l2Options) -> CurrentPattern {
    let (alpha, eps) = (params.alpha(), params.weight());
    let l = p.n_electrodes();
    let q = p.l2_compressed();
    let floor = eps * p.nu * (p.n_nuisance() as f64).sqrt();
    let lam = alpha * p.zeta;
    let x1 = &p.x1;
    let (mu, gamma) = (p.mu, p.gamma);

    let norms = [spectral_norm(&p.l1), spectral_norm(q)];
    let total: f64 = norms.iter().sum();
    let nmax = norms.iter().cloned().fold(0.0, f64::max);
    if !(nmax > 0.0) {
        return CurrentPattern::finish(vec![0.0; l], p, l1l2_objective(p, &DVector::zeros(l), alpha, eps), 0, 0.0);
    }
    // block step sizes with τ·Σ σ_b‖K_b‖² < 1; s trades the primal scale μ
    // against the unit-scale dual variables
    let s = (mu * total / nmax).sqrt();
    let tau = 0.95 * s / total;
    let sig: Vec<f64> = norms.iter().map(|n| if *n > 0.0 { 1.0 / (n * s) } else { 0.0 }).collect();

    let mut y = DVector::<f64>::zeros(l);
    let mut u1 = DVector::<f64>::zeros(p.l1.nrows());
    let mut u2 = DVector::<f64>::zeros(q.nrows());
    let mut iterations = 0;
    let mut gap = f64::INFINITY;
    let mut primal = f64::NAN;
    let mut converged = false;

    while iterations < opts.max_iter {
        let kt = p.l1.tr_mul(&u1) + q.tr_mul(&u2);
        let step: Vec<f64> = (0..l).map(|i| y[i] - tau * kt[i]).collect();
        let y_new = DVector::from_vec(prox_l1_feasible(&step, tau * lam, mu, gamma));
        let ybar = 2.0 * &y_new - &y;
        y = y_new;

        let mut v1 = &u1 + sig[0] * (&p.l1 * &ybar - x1);
        project_unit_ball(v1.as_mut_slice());
        u1 = v1;
        let v2 = &u2 + sig[1] * (q * &ybar);
        let r = v2.norm();
        u2 = if r > 0.0 {
            let target = (r - sig[1] * floor).clamp(0.0, 1.0);
            v2 * (target / r)
        } else {
            v2
        };
        iterations += 1;

        if iterations % 10 == 0 || iterations == opts.max_iter {
            primal = (&p.l1 * &y - x1).norm() + (q * &y).norm().max(floor) + lam * y.abs().sum();
            let a = p.l1.tr_mul(&u1) + q.tr_mul(&u2);
            let support = 0.5 * mu * (2.0 * lam + a.min() - a.max()).min(0.0);
            let dual = support - u1.dot(x1) - floor * (u2.norm() - 1.0);
            gap = primal - dual;
            if gap <= opts.tol * primal.abs().max(dual.abs()) {
                converged = true;
                break;
            }
        }
    }

    let y = y.as_slice().to_vec();
    if converged {
        CurrentPattern::finish(y, p, primal, iterations, gap)
    } else {
        CurrentPattern::failed(y, p, SolveStatus::MaxIter, primal, iterations, gap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::testutil::random_problem;
    use proptest::prelude::*;

    #[test]
    fn l1_ball_projection() {
        let y = project_l1_ball(&[3.0, -1.0, 0.5], 2.0);
        assert!((y[0] - 2.0).abs() < 1e-15 && y[1] == 0.0 && y[2] == 0.0);
        assert_eq!(project_l1_ball(&[0.5, -0.5], 2.0), vec![0.5, -0.5]);
    }

    proptest! {
        #[test]
        fn projection_is_feasible_and_optimal(v in prop::collection::vec(-5e-3f64..5e-3, 2..8)) {
            let mu = 4e-3;
            let proj = project_feasible(&v, mu, mu / 2.0, 1000, 1e-10);
            let x = &proj.y;
            prop_assert!(x.iter().sum::<f64>().abs() <= 1e-15);
            prop_assert!(proj.distance <= 1e-10 * mu);
            // variational inequality: (v − x)ᵀ(w − x) ≤ 0 for feasible w
            let n = v.len();
            for i in 0..n {
                for j in 0..n {
                    if i == j { continue; }
                    let mut w = vec![0.0; n];
                    w[i] = mu / 2.0;
                    w[j] = -mu / 2.0;
                    let ip: f64 = (0..n).map(|k| (v[k] - x[k]) * (w[k] - x[k])).sum();
                    prop_assert!(ip <= 1e-9 * mu * mu);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn unpenalized_prox_matches_dykstra(v in prop::collection::vec(-6e-3f64..6e-3, 2..10)) {
            let mu = 4e-3;
            let exact = prox_l1_feasible(&v, 0.0, mu, mu / 2.0);
            let cyclic = project_feasible(&v, mu, mu / 2.0, 100_000, 1e-13);
            for (a, b) in exact.iter().zip(&cyclic.y) {
                prop_assert!((a - b).abs() <= 1e-9 * mu, "{exact:?} vs {:?}", cyclic.y);
            }
        }

        #[test]
        fn prox_is_feasible(v in prop::collection::vec(-6e-3f64..6e-3, 2..10), t in 0.0f64..2e-3) {
            let mu = 4e-3;
            let y = prox_l1_feasible(&v, t, mu, mu / 2.0);
            prop_assert!(y.iter().sum::<f64>().abs() <= 1e-15);
            prop_assert!(y.iter().map(|e| e.abs()).sum::<f64>() <= mu * (1.0 + 1e-12));
            prop_assert!(y.iter().all(|e| e.abs() <= mu / 2.0));
        }
    }

    #[test]
    fn large_threshold_zeroes_prox() {
        let y = prox_l1_feasible(&[1e-3, -2e-3, 5e-4], 3e-3, 4e-3, 2e-3);
        assert!(y.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn zero_target_gives_zero() {
        let mut p = random_problem(5, 4, 8);
        p.x1 = DVector::zeros(3);
        let out = solve_l1l2(&p, MethodParams::new(-40.0, -400.0).unwrap());
        assert_eq!(out.status, SolveStatus::Degenerate);
        assert!(out.y.iter().all(|v| v.abs() < 1e-12 * p.mu));
    }

    #[test]
    fn huge_penalty_gives_zero() {
        let p = random_problem(6, 4, 8);
        let out = solve_l1l2(&p, MethodParams::new(200.0, -40.0).unwrap());
        assert_eq!(out.status, SolveStatus::Degenerate, "{out:?}");
    }

    #[test]
    fn output_satisfies_constraints() {
        let p = random_problem(7, 6, 15);
        let out = solve_l1l2(&p, MethodParams::new(-60.0, -20.0).unwrap());
        assert_eq!(out.status, SolveStatus::Optimal, "{out:?}");
        let l1: f64 = out.y.iter().map(|v| v.abs()).sum();
        assert!(out.y.iter().sum::<f64>().abs() <= 1e-9 * p.mu);
        assert!((l1 - p.mu).abs() <= 1e-9 * p.mu);
        assert!(out.max_current() <= p.gamma * (1.0 + 1e-9));
    }
}
