//! Evaluation quantities of a current pattern and the lattice-based
//! deviation estimate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::StimulusProblem;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("target field x1 is zero")]
    ZeroTarget,
    #[error("zero vector in angle difference")]
    ZeroVector,
    #[error("only {0} finite samples in the 3×3 window, need 6")]
    TooFewSamples(usize),
    #[error("current pattern has {got} entries, problem has {want} electrodes")]
    Length { got: usize, want: usize },
}

fn check_len(p: &StimulusProblem, y: &[f64]) -> Result<DVector<f64>, MetricsError> {
    if y.len() != p.n_electrodes() {
        return Err(MetricsError::Length {
            got: y.len(),
            want: p.n_electrodes(),
        });
    }
    Ok(DVector::from_column_slice(y))
}

/// `Γ = x₁ᵀL₁y/‖x₁‖₂` (A/m²).
pub fn focused_density(p: &StimulusProblem, y: &[f64]) -> Result<f64, MetricsError> {
    let norm = p.x1.norm();
    if norm == 0.0 {
        return Err(MetricsError::ZeroTarget);
    }
    let y = check_len(p, y)?;
    Ok(p.x1.dot(&(&p.l1 * y)) / norm)
}

/// `Θ = Γ/(‖L₂y‖₂/√M)`; zero nuisance gives `+∞` unless `Γ = 0`.
pub fn ratio_from_parts(gamma: f64, nuisance_norm: f64, m: usize) -> f64 {
    if gamma == 0.0 {
        return 0.0;
    }
    if nuisance_norm == 0.0 {
        return f64::INFINITY;
    }
    gamma / (nuisance_norm / (m as f64).sqrt())
}

pub fn current_ratio(p: &StimulusProblem, y: &[f64]) -> Result<f64, MetricsError> {
    let gamma = focused_density(p, y)?;
    let nuisance = (&p.l2 * check_len(p, y)?).norm();
    Ok(ratio_from_parts(gamma, nuisance, p.n_nuisance()))
}

/// Angle between two 3-vectors in degrees.
pub fn angle_difference(j1: &[f64; 3], j2: &[f64; 3]) -> Result<f64, MetricsError> {
    let n1 = j1.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n2 = j2.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(MetricsError::ZeroVector);
    }
    let c = j1.iter().zip(j2).map(|(a, b)| a * b).sum::<f64>() / (n1 * n2);
    Ok(c.clamp(-1.0, 1.0).acos().to_degrees())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    /// Focused density Γ (A/m²).
    pub gamma: f64,
    /// Current ratio Θ.
    pub theta: f64,
    /// Angle difference (degrees).
    pub ad_deg: f64,
    /// ‖y‖∞ (A).
    pub max_current: f64,
    /// Θ is the `+∞` sentinel for a vanishing nuisance field.
    pub theta_sentinel: bool,
}

/// All four quantities for a current pattern of `p`.
pub fn evaluate(p: &StimulusProblem, y: &[f64]) -> Result<MetricSet, MetricsError> {
    let yv = check_len(p, y)?;
    let gamma = focused_density(p, y)?;
    let nuisance = (&p.l2 * &yv).norm();
    let theta = ratio_from_parts(gamma, nuisance, p.n_nuisance());
    let focused = &p.l1 * &yv;
    let j1 = [focused[0], focused[1], focused[2]];
    let j2 = [p.x1[0], p.x1[1], p.x1[2]];
    Ok(MetricSet {
        gamma,
        theta,
        ad_deg: angle_difference(&j1, &j2)?,
        max_current: yv.amax(),
        theta_sentinel: theta.is_infinite(),
    })
}

/// Least-squares quadratic through a 3×3 window and the largest change of
/// the fit within half a lattice step of the centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationFit {
    /// `c₀ + c₁a + c₂b + c₃a² + c₄ab + c₅b²` in lattice units.
    pub coefficients: [f64; 6],
    pub deviation: f64,
    /// Some samples were non-finite and replaced by a neighbour.
    pub imputed: bool,
    pub step_db: f64,
}

impl DeviationFit {
    pub fn eval(&self, a: f64, b: f64) -> f64 {
        let c = &self.coefficients;
        c[0] + c[1] * a + c[2] * b + c[3] * a * a + c[4] * a * b + c[5] * b * b
    }
}

/// Fits `grid[i][j]`, sampled at offsets `(i−1, j−1)`, and evaluates the
/// deviation on the half-step offsets `{−½, 0, ½}²`.
pub fn deviation_estimate(grid: &[[f64; 3]; 3], step_db: f64) -> Result<DeviationFit, MetricsError> {
    deviation_estimate_at(grid, step_db, (0.0, 0.0))
}

/// As [`deviation_estimate`], with the half-step offsets taken around
/// `centre` instead of the window centre, for windows shifted at the
/// lattice boundary.
pub fn deviation_estimate_at(
    grid: &[[f64; 3]; 3],
    step_db: f64,
    centre: (f64, f64),
) -> Result<DeviationFit, MetricsError> {
    let finite = grid.iter().flatten().filter(|v| v.is_finite()).count();
    if finite < 6 {
        return Err(MetricsError::TooFewSamples(finite));
    }
    let mut samples = *grid;
    let imputed = finite < 9;
    if imputed {
        for i in 0..3 {
            for j in 0..3 {
                if grid[i][j].is_finite() {
                    continue;
                }
                let mut best = (usize::MAX, f64::NAN);
                for a in 0..3 {
                    for b in 0..3 {
                        let d = (a as usize).abs_diff(i) + (b as usize).abs_diff(j);
                        if grid[a][b].is_finite() && d < best.0 {
                            best = (d, grid[a][b]);
                        }
                    }
                }
                samples[i][j] = best.1;
            }
        }
    }

    let design = DMatrix::from_fn(9, 6, |r, c| {
        let a = (r / 3) as f64 - 1.0;
        let b = (r % 3) as f64 - 1.0;
        [1.0, a, b, a * a, a * b, b * b][c]
    });
    let rhs = DVector::from_fn(9, |r, _| samples[r / 3][r % 3]);
    let qr = design.qr();
    let qtb = qr.q().tr_mul(&rhs);
    let coef = qr.r().solve_upper_triangular(&qtb).expect("full-rank design");
    let mut fit = DeviationFit {
        coefficients: [coef[0], coef[1], coef[2], coef[3], coef[4], coef[5]],
        deviation: 0.0,
        imputed,
        step_db,
    };
    let at = fit.eval(centre.0, centre.1);
    let mut dev: f64 = 0.0;
    for a in [-0.5, 0.0, 0.5] {
        for b in [-0.5, 0.0, 0.5] {
            dev = dev.max((fit.eval(centre.0 + a, centre.1 + b) - at).abs());
        }
    }
    fit.deviation = dev;
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::testutil::random_problem;
    use proptest::prelude::*;

    fn sample(f: impl Fn(f64, f64) -> f64) -> [[f64; 3]; 3] {
        let mut g = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                g[i][j] = f(i as f64 - 1.0, j as f64 - 1.0);
            }
        }
        g
    }

    #[test]
    fn deviation_examples() {
        let fit = deviation_estimate(&sample(|a, b| a * a + b * b), 5.0).unwrap();
        assert!((fit.deviation - 0.5).abs() < 1e-12);
        let fit = deviation_estimate(&sample(|a, _| 2.0 * a), 5.0).unwrap();
        assert!((fit.deviation - 1.0).abs() < 1e-12);
        let fit = deviation_estimate(&sample(|_, _| 3.0), 5.0).unwrap();
        assert!(fit.deviation.abs() < 1e-12);
    }

    #[test]
    fn imputes_missing_samples() {
        let mut g = sample(|a, b| a + b);
        g[2][2] = f64::NAN;
        let fit = deviation_estimate(&g, 5.0).unwrap();
        assert!(fit.imputed && fit.deviation.is_finite());
        g[0][0] = f64::INFINITY;
        g[0][1] = f64::NAN;
        g[0][2] = f64::NAN;
        assert_eq!(deviation_estimate(&g, 5.0).unwrap_err(), MetricsError::TooFewSamples(5));
    }

    #[test]
    fn ratio_examples() {
        assert!((ratio_from_parts(0.11, 0.22, 4) - 1.0).abs() < 1e-15);
        assert_eq!(ratio_from_parts(0.0, 0.0, 4), 0.0);
        assert_eq!(ratio_from_parts(0.1, 0.0, 4), f64::INFINITY);
    }

    #[test]
    fn angle_examples() {
        let j = [0.3, -0.2, 0.5];
        assert!(angle_difference(&[0.6, -0.4, 1.0], &j).unwrap().abs() < 1e-6);
        assert!((angle_difference(&[-0.3, 0.2, -0.5], &j).unwrap() - 180.0).abs() < 1e-6);
        assert!((angle_difference(&[1.0, 0.0, 0.0], &[0.0, 2.0, 0.0]).unwrap() - 90.0).abs() < 1e-12);
        assert_eq!(angle_difference(&[0.0; 3], &j), Err(MetricsError::ZeroVector));
    }

    #[test]
    fn focused_density_examples() {
        let p = random_problem(11, 3, 6);
        assert_eq!(focused_density(&p, &[0.0; 3]).unwrap(), 0.0);
        let mut q = p.clone();
        q.x1 = DVector::zeros(3);
        assert_eq!(focused_density(&q, &[1.0, -1.0, 0.0]), Err(MetricsError::ZeroTarget));
    }

    #[test]
    fn aligned_and_orthogonal_fields() {
        // L₁ = I on the first three electrodes
        let l1 = DMatrix::from_fn(3, 4, |i, j| if i == j { 1.0 } else { 0.0 });
        let l2 = DMatrix::from_element(2, 4, 0.1);
        let x1 = DVector::from_vec(vec![0.0, 0.12, 0.16]);
        let p = StimulusProblem::new(l1, l2, x1, 4e-3, 2e-3, 1.0, 0.16, 1.0, vec![1, 2, 3, 4]).unwrap();
        let g = focused_density(&p, &[0.0, 0.12, 0.16, -0.28]).unwrap();
        assert!((g - 0.2).abs() < 1e-15);
        let g = focused_density(&p, &[0.0, 0.16, -0.12, -0.04]).unwrap();
        assert!(g.abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn exact_quadratics_reproduced(c in prop::array::uniform6(-10.0f64..10.0)) {
            let f = |a: f64, b: f64| c[0] + c[1] * a + c[2] * b + c[3] * a * a + c[4] * a * b + c[5] * b * b;
            let fit = deviation_estimate(&sample(f), 5.0).unwrap();
            let mut want: f64 = 0.0;
            for a in [-0.5, 0.0, 0.5] {
                for b in [-0.5, 0.0, 0.5] {
                    want = want.max((f(a, b) - c[0]).abs());
                }
            }
            prop_assert!((fit.deviation - want).abs() <= 1e-12 * (1.0 + want));
            for i in 0..3 {
                for j in 0..3 {
                    let (a, b) = (i as f64 - 1.0, j as f64 - 1.0);
                    prop_assert!((fit.eval(a, b) - f(a, b)).abs() <= 1e-12 * (1.0 + f(a, b).abs()));
                }
            }
        }

        #[test]
        fn gamma_is_linear(seed in 0u64..50, s in -3.0f64..3.0) {
            let p = random_problem(seed, 4, 5);
            let a = [1.0, -0.5, 0.2, -0.7];
            let b = [0.3, 0.1, -0.6, 0.2];
            let comb: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + s * y).collect();
            let lhs = focused_density(&p, &comb).unwrap();
            let rhs = focused_density(&p, &a).unwrap() + s * focused_density(&p, &b).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }

        #[test]
        fn theta_scale_invariant(seed in 0u64..50, s in 1e-3f64..1e3) {
            let p = random_problem(seed, 4, 5);
            let y = [1.0, -0.5, 0.2, -0.7];
            let ys: Vec<f64> = y.iter().map(|v| v * s).collect();
            let a = current_ratio(&p, &y).unwrap();
            let b = current_ratio(&p, &ys).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn angle_symmetric_and_scale_free(
            u in prop::array::uniform3(-1.0f64..1.0),
            v in prop::array::uniform3(-1.0f64..1.0),
            s in 1e-3f64..1e3,
        ) {
            prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
            let a = angle_difference(&u, &v).unwrap();
            prop_assert_eq!(a, angle_difference(&v, &u).unwrap());
            let us = u.map(|x| x * s);
            prop_assert!((angle_difference(&us, &v).unwrap() - a).abs() < 1e-9);
            prop_assert!((0.0..=180.0).contains(&a));
        }
    }
}
