use nalgebra::{DMatrix, DVector};

use super::{CurrentPattern, MethodParams, OptimError, StimulusProblem};
use crate::metrics::focused_density;

fn normal_matrix(p: &StimulusProblem, alpha: f64, delta: f64) -> DMatrix<f64> {
    let l = p.n_electrodes();
    let mut m = p.l1.tr_mul(&p.l1) + p.l2_gram() * (delta * delta * alpha * alpha);
    let shift = alpha * alpha * p.sigma_scale * p.sigma_scale;
    for i in 0..l {
        m[(i, i)] += shift;
    }
    m
}

/// Unprojected, unscaled minimizer of
/// `‖L₁y−x₁‖₂² + δ²α²‖L₂y‖₂² + α²σ²‖y‖₂²`, solved as the least-squares
/// problem `[L₁; δαR₂; ασI] y ≈ [x₁; 0; 0]` by QR, with `R₂` the triangular
/// factor of `L₂`. Unlike the normal equations this stays accurate when
/// `α²σ²` is below round-off relative to `‖L₁‖²`.
pub fn tls_raw(p: &StimulusProblem, alpha: f64, delta: f64) -> Result<DVector<f64>, OptimError> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(OptimError::InvalidParameter(format!("α must be positive, got {alpha}")));
    }
    let l = p.n_electrodes();
    let r2 = p.l2_compressed();
    let (t, k) = (p.l1.nrows(), r2.nrows());
    let mut a = DMatrix::zeros(t + k + l, l);
    a.rows_mut(0, t).copy_from(&p.l1);
    a.rows_mut(t, k).copy_from(&(r2 * (delta * alpha)));
    for i in 0..l {
        a[(t + k + i, i)] = alpha * p.sigma_scale;
    }
    let mut b = DVector::zeros(t + k + l);
    b.rows_mut(0, t).copy_from(&p.x1);
    let qr = a.qr();
    let qtb = qr.q().tr_mul(&b);
    let y = qr.r().solve_upper_triangular(&qtb).ok_or(OptimError::Singular)?;
    if y.iter().all(|v| v.is_finite()) {
        Ok(y)
    } else {
        Err(OptimError::Singular)
    }
}

/// Relative residual of the TLS normal equations at `y`.
pub fn tls_residual(p: &StimulusProblem, alpha: f64, delta: f64, y: &DVector<f64>) -> f64 {
    let rhs = p.l1.tr_mul(&p.x1);
    let m = normal_matrix(p, alpha, delta);
    let r = &m * y - &rhs;
    let scale = rhs.norm().max(m.norm() * y.norm());
    if scale == 0.0 {
        0.0
    } else {
        r.norm() / scale
    }
}

pub fn solve_tls(p: &StimulusProblem, params: MethodParams) -> Result<CurrentPattern, OptimError> {
    let (alpha, delta) = (params.alpha(), params.weight());
    let y = tls_raw(p, alpha, delta)?;
    let raw = (&p.l1 * &y - &p.x1).norm_squared()
        + (delta * alpha).powi(2) * (&p.l2 * &y).norm_squared()
        + (alpha * p.sigma_scale).powi(2) * y.norm_squared();
    let residual = tls_residual(p, alpha, delta, &y);
    Ok(CurrentPattern::finish(y.as_slice().to_vec(), p, raw, 1, residual))
}

/// The unweighted (`δ = 0`) solution `ỹ = W L₁ᵀx₁` with
/// `W = (L₁ᵀL₁ + α²σ²I)⁻¹`, and quantities for checking how the focused
/// density reacts to a small nuisance weight.
#[derive(Debug, Clone)]
pub struct TlsDiagnostics {
    pub alpha: f64,
    pub y_tilde: DVector<f64>,
    pub gamma_tilde: f64,
    /// Relative residual of `W⁻¹ỹ = L₁ᵀx₁`.
    pub residual: f64,
    w: DMatrix<f64>,
}

impl TlsDiagnostics {
    /// `c` in `1 − Γ(δ)/Γ̃ ≈ δ²α²c`, namely `‖L₂ỹ‖₂²/(x₁ᵀL₁ỹ)`.
    pub fn decrease_coefficient(&self, p: &StimulusProblem) -> f64 {
        (&p.l2 * &self.y_tilde).norm_squared() / p.x1.dot(&(&p.l1 * &self.y_tilde))
    }

    /// `‖W L₂ᵀL₂‖₂`, the size of the first-order perturbation operator.
    pub fn perturbation_norm(&self, p: &StimulusProblem) -> f64 {
        (&self.w * p.l2_gram()).singular_values().max()
    }

    /// `⟨a, b⟩_W = aᵀWb`.
    pub fn w_inner(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        a.dot(&(&self.w * b))
    }

    /// `‖a‖_W`.
    pub fn w_norm(&self, a: &DVector<f64>) -> f64 {
        self.w_inner(a, a).sqrt()
    }
}

pub fn tls_diagnostics(p: &StimulusProblem, alpha: f64) -> Result<TlsDiagnostics, OptimError> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(OptimError::InvalidParameter(format!("α must be positive, got {alpha}")));
    }
    let m = normal_matrix(p, alpha, 0.0);
    let chol = m.clone().cholesky().ok_or(OptimError::Singular)?;
    let w = chol.inverse();
    let y_tilde = chol.solve(&p.l1.tr_mul(&p.x1));
    let residual = tls_residual(p, alpha, 0.0, &y_tilde);
    let gamma_tilde = if p.x1.norm() > 0.0 {
        focused_density(p, y_tilde.as_slice()).map_err(|e| OptimError::InvalidProblem(e.to_string()))?
    } else {
        0.0
    };
    Ok(TlsDiagnostics {
        alpha,
        y_tilde,
        gamma_tilde,
        residual,
        w,
    })
}
