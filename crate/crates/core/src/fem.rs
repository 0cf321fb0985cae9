//! Complete electrode model on P1 tetrahedral elements.
//!
//! The discrete system couples nodal potentials `z` and electrode voltages
//! `w` through
//!
//! ```text
//! ( A   -B ) ( z )   ( 0 )
//! ( -Bᵀ  C ) ( w ) = ( y )
//! ```
//!
//! where `A` is the conductivity-weighted stiffness matrix plus the
//! electrode surface mass terms, `B` the electrode coupling and `C` the
//! diagonal of inverse contact impedances. The block operator annihilates
//! constants; every solve here fixes the gauge by requiring `Σ w = 0`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::mesh::{cross, dot, sub, ElectrodeLayout, FieldPointSet, HeadMesh, MeshError, Point, TargetSpec};
use crate::optim::StimulusProblem;
use crate::sparse::{CscMatrix, FactorError, SymmetricFactor};

#[derive(Debug, Error)]
pub enum FemError {
    #[error("tetrahedron {0} is degenerate")]
    DegenerateElement(usize),
    #[error("electrode {0} has zero area")]
    ZeroAreaElectrode(u32),
    #[error("current pattern violates Kirchhoff's law: sum {sum:e}, |y|_1 {l1:e}")]
    Unbalanced { sum: f64, l1: f64 },
    #[error("{what} did not converge after {iterations} iterations (relative residual {residual:e})")]
    NotConverged {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },
    #[error("factorization failed: {0}")]
    Factorization(#[from] FactorError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("{0}")]
    Invalid(String),
}

/// Gradients of the four barycentric basis functions and the volume.
pub fn shape_gradients(p: [&Point; 4]) -> Option<([Point; 4], f64)> {
    let e1 = sub(p[1], p[0]);
    let e2 = sub(p[2], p[0]);
    let e3 = sub(p[3], p[0]);
    let det = dot(&e1, &cross(&e2, &e3));
    let scale = (dot(&e1, &e1) * dot(&e2, &e2) * dot(&e3, &e3)).sqrt();
    if !(det.abs() > 1e-12 * scale) {
        return None;
    }
    let g1 = cross(&e2, &e3).map(|v| v / det);
    let g2 = cross(&e3, &e1).map(|v| v / det);
    let g3 = cross(&e1, &e2).map(|v| v / det);
    let g0 = [0, 1, 2].map(|k| -(g1[k] + g2[k] + g3[k]));
    Some(([g0, g1, g2, g3], det.abs() / 6.0))
}

/// Assembled CEM matrices.
#[derive(Debug, Clone)]
pub struct CemSystem {
    /// Symmetric `N×N`, both triangles stored.
    pub a: CscMatrix,
    /// `N×L`.
    pub b: CscMatrix,
    /// Diagonal of `C`, `1/Z_ℓ`.
    pub c: Vec<f64>,
    pub electrode_ids: Vec<u32>,
}

impl CemSystem {
    pub fn n_nodes(&self) -> usize {
        self.a.nrows
    }

    pub fn n_electrodes(&self) -> usize {
        self.c.len()
    }

    /// Applies the block operator to `(z, w)`.
    pub fn apply(&self, z: &[f64], w: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut top = self.a.mul_vec(z);
        let bw = self.b.mul_vec(w);
        for (t, v) in top.iter_mut().zip(&bw) {
            *t -= v;
        }
        let mut bottom = self.b.tr_mul_vec(z);
        for ((o, &wi), &ci) in bottom.iter_mut().zip(w).zip(&self.c) {
            *o = ci * wi - *o;
        }
        (top, bottom)
    }
}

/// Assembles stiffness, electrode surface terms, `B` and `C`.
///
/// Element contributions are computed in parallel and merged in element
/// order, so the matrices are bitwise independent of the thread count.
pub fn assemble(mesh: &HeadMesh, layout: &ElectrodeLayout) -> Result<CemSystem, FemError> {
    let n = mesh.nodes.len();
    let local: Vec<Result<[[f64; 4]; 4], FemError>> = (0..mesh.tets.len())
        .into_par_iter()
        .map(|t| {
            let (g, vol) = shape_gradients(mesh.tet_points(t)).ok_or(FemError::DegenerateElement(t))?;
            let s = mesh.conductivity(t) * vol;
            let mut k = [[0.0; 4]; 4];
            for i in 0..4 {
                for j in 0..4 {
                    k[i][j] = s * dot(&g[i], &g[j]);
                }
            }
            Ok(k)
        })
        .collect();

    let mut a_trip = Vec::with_capacity(mesh.tets.len() * 16);
    for (t, k) in local.into_iter().enumerate() {
        let k = k?;
        let tet = mesh.tets[t];
        for i in 0..4 {
            for j in 0..4 {
                a_trip.push((tet[i], tet[j], k[i][j]));
            }
        }
    }

    let faces = mesh.boundary_faces();
    let l = layout.electrodes.len();
    let mut b_trip = Vec::new();
    let mut c = Vec::with_capacity(l);
    for (col, e) in layout.electrodes.iter().enumerate() {
        let area: f64 = e.faces.iter().map(|&f| mesh.face_area(&faces[f])).sum();
        if !(area > 0.0) {
            return Err(FemError::ZeroAreaElectrode(e.id));
        }
        let w = 1.0 / (e.impedance * area);
        for &f in &e.faces {
            let face = &faces[f];
            let fa = mesh.face_area(face);
            for i in 0..3 {
                for j in 0..3 {
                    let m = if i == j { fa / 6.0 } else { fa / 12.0 };
                    a_trip.push((face.nodes[i], face.nodes[j], w * m));
                }
                b_trip.push((face.nodes[i], col, w * fa / 3.0));
            }
        }
        c.push(1.0 / e.impedance);
    }

    Ok(CemSystem {
        a: CscMatrix::from_triplets(n, n, &a_trip),
        b: CscMatrix::from_triplets(n, l, &b_trip),
        c,
        electrode_ids: layout.ids(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardSolution {
    /// Nodal potentials (V).
    pub z: Vec<f64>,
    /// Electrode voltages (V), mean zero.
    pub w: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
}

fn check_balanced(y: &[f64]) -> Result<(), FemError> {
    let sum: f64 = y.iter().sum();
    let l1: f64 = y.iter().map(|v| v.abs()).sum();
    if sum.abs() > 1e-12 * l1 {
        return Err(FemError::Unbalanced { sum, l1 });
    }
    Ok(())
}

/// Solves the block system for a balanced current pattern with
/// Jacobi-preconditioned conjugate gradients on the full `(z, w)` system,
/// then shifts the solution to the mean-zero electrode gauge.
///
/// This route is independent of the factorization used by
/// [`resistivity_matrix`].
pub fn solve_forward(sys: &CemSystem, y: &[f64]) -> Result<ForwardSolution, FemError> {
    let n = sys.n_nodes();
    let l = sys.n_electrodes();
    if y.len() != l {
        return Err(FemError::Invalid(format!("expected {l} currents, got {}", y.len())));
    }
    check_balanced(y)?;
    if y.iter().all(|&v| v == 0.0) {
        return Ok(ForwardSolution {
            z: vec![0.0; n],
            w: vec![0.0; l],
            iterations: 0,
            relative_residual: 0.0,
        });
    }

    let apply = |x: &[f64]| {
        let (top, bottom) = sys.apply(&x[..n], &x[n..]);
        let mut out = top;
        out.extend(bottom);
        out
    };
    let mut inv_diag: Vec<f64> = sys.a.diagonal().iter().map(|d| 1.0 / d).collect();
    inv_diag.extend(sys.c.iter().map(|c| 1.0 / c));

    let mut rhs = vec![0.0; n];
    rhs.extend_from_slice(y);
    let rhs_norm = norm2(&rhs);
    let mut x = vec![0.0; n + l];
    let mut r = rhs.clone();
    let mut zv: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
    let mut p = zv.clone();
    let mut rz = dot_slices(&r, &zv);
    let max_iter = 20 * (n + l) + 1000;
    let mut iterations = 0;
    while iterations < max_iter {
        if norm2(&r) <= 1e-14 * rhs_norm {
            break;
        }
        let ap = apply(&p);
        let alpha = rz / dot_slices(&p, &ap);
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        // refresh the recursive residual periodically to stop drift
        if iterations % 200 == 199 {
            let ax = apply(&x);
            for i in 0..r.len() {
                r[i] = rhs[i] - ax[i];
            }
        }
        for i in 0..zv.len() {
            zv[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot_slices(&r, &zv);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..p.len() {
            p[i] = zv[i] + beta * p[i];
        }
        iterations += 1;
    }

    let shift = x[n..].iter().sum::<f64>() / l as f64;
    for v in &mut x {
        *v -= shift;
    }
    let ax = apply(&x);
    let res: Vec<f64> = ax.iter().zip(&rhs).map(|(a, b)| a - b).collect();
    let relative_residual = norm2(&res) / rhs_norm;
    if relative_residual > 1e-10 {
        return Err(FemError::NotConverged {
            what: "forward solve",
            iterations,
            residual: relative_residual,
        });
    }
    let w = x.split_off(n);
    Ok(ForwardSolution {
        z: x,
        w,
        iterations,
        relative_residual,
    })
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `R = A⁻¹B (C − BᵀA⁻¹B)⁻¹` with the electrode-space inverse taken on the
/// mean-zero gauge.
#[derive(Debug, Clone)]
pub struct ResistivityMatrix {
    /// `N×L`; `z = R y` for balanced `y`.
    pub r: DMatrix<f64>,
    /// Unsymmetrized Schur complement `C − BᵀA⁻¹B`.
    pub schur: DMatrix<f64>,
}

impl ResistivityMatrix {
    pub fn potentials(&self, y: &[f64]) -> Vec<f64> {
        (&self.r * DVector::from_column_slice(y)).as_slice().to_vec()
    }
}

pub fn resistivity_matrix(sys: &CemSystem) -> Result<ResistivityMatrix, FemError> {
    let n = sys.n_nodes();
    let l = sys.n_electrodes();
    let factor = SymmetricFactor::cholesky(&sys.a.lower_triangle())?;

    let mut x = vec![0.0; n * l];
    for col in 0..l {
        for (row, v) in sys.b.column(col) {
            x[col * n + row] = v;
        }
    }
    factor.solve_in_place(&mut x);
    let x = DMatrix::from_column_slice(n, l, &x);

    let mut schur = DMatrix::from_diagonal(&DVector::from_column_slice(&sys.c));
    for i in 0..l {
        for j in 0..l {
            let btx: f64 = sys.b.column(i).map(|(row, v)| v * x[(row, j)]).sum();
            schur[(i, j)] -= btx;
        }
    }

    // S annihilates constants; adding c·11ᵀ/L makes it invertible and keeps
    // the solution of S w = y in the zero-sum subspace when 1ᵀy = 0.
    let sym = (&schur + schur.transpose()) * 0.5;
    let c = sym.trace() / l as f64;
    let gauged = sym.add_scalar(c / l as f64);
    let inv = gauged
        .cholesky()
        .ok_or_else(|| FemError::Invalid("gauged Schur complement is not positive definite".into()))?
        .inverse();
    Ok(ResistivityMatrix { r: x * inv, schur })
}

/// Dense tES lead field: rows `k·P + p` hold the `k`-th Cartesian component
/// of the current density `−σ∇u` at field point `p` per unit current on
/// each electrode.
#[derive(Debug, Clone, PartialEq)]
pub struct LeadField {
    pub matrix: DMatrix<f64>,
    pub points: Vec<Point>,
    pub electrode_ids: Vec<u32>,
}

impl LeadField {
    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    pub fn n_electrodes(&self) -> usize {
        self.matrix.ncols()
    }

    /// The three rows holding the field at point `p`.
    pub fn target_rows(&self, p: usize) -> [usize; 3] {
        let np = self.n_points();
        [p, np + p, 2 * np + p]
    }

    /// Current density at point `p` for pattern `y`.
    pub fn density_at(&self, p: usize, y: &[f64]) -> [f64; 3] {
        self.target_rows(p).map(|row| {
            (0..self.n_electrodes())
                .map(|c| self.matrix[(row, c)] * y[c])
                .sum()
        })
    }
}

pub fn lead_field(
    sys: &CemSystem,
    mesh: &HeadMesh,
    points: &FieldPointSet,
) -> Result<LeadField, FemError> {
    let res = resistivity_matrix(sys)?;
    lead_field_from_resistivity(&res, sys, mesh, points)
}

pub fn lead_field_from_resistivity(
    res: &ResistivityMatrix,
    sys: &CemSystem,
    mesh: &HeadMesh,
    points: &FieldPointSet,
) -> Result<LeadField, FemError> {
    let np = points.len();
    let l = sys.n_electrodes();
    let rows: Vec<Result<[Vec<f64>; 3], FemError>> = points
        .tets
        .par_iter()
        .map(|&t| {
            if t >= mesh.tets.len() {
                return Err(FemError::Invalid(format!("field point owner {t} out of range")));
            }
            let (g, _) = shape_gradients(mesh.tet_points(t)).ok_or(FemError::DegenerateElement(t))?;
            let sigma = mesh.conductivity(t);
            let nodes = mesh.tets[t];
            Ok([0, 1, 2].map(|k| {
                (0..l)
                    .map(|col| {
                        -sigma
                            * (0..4)
                                .map(|i| g[i][k] * res.r[(nodes[i], col)])
                                .sum::<f64>()
                    })
                    .collect()
            }))
        })
        .collect();
    let mut matrix = DMatrix::zeros(3 * np, l);
    for (p, row) in rows.into_iter().enumerate() {
        let row = row?;
        for k in 0..3 {
            for col in 0..l {
                matrix[(k * np + p, col)] = row[k][col];
            }
        }
    }
    Ok(LeadField {
        matrix,
        points: points.points.clone(),
        electrode_ids: sys.electrode_ids.clone(),
    })
}

/// Spectral norm by power iteration on `LᵀL`, stopped at 1e-6 relative
/// change.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    let gram = m.transpose() * m;
    let n = gram.ncols();
    if n == 0 {
        return 0.0;
    }
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    // a start vector orthogonal to the dominant one would stall, so perturb
    for i in 0..n {
        v[i] += 1e-3 * ((i as f64 + 1.0) * 0.754_877_666).sin();
    }
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..10_000 {
        let w = &gram * &v;
        let next = w.norm();
        if next == 0.0 {
            return 0.0;
        }
        v = w / next;
        if (next - lambda).abs() <= 1e-6 * next {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.sqrt()
}

/// Maximum absolute column sum.
pub fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Splits the lead field into target rows and nuisance rows and sets up the
/// dose limits and scaling factors.
pub fn split_problem(
    lf: &LeadField,
    target: &TargetSpec,
    mu: f64,
    gamma: f64,
) -> Result<StimulusProblem, FemError> {
    let np = lf.n_points();
    if target.field_point >= np {
        return Err(FemError::Invalid(format!(
            "target field point {} not in lead field with {np} points",
            target.field_point
        )));
    }
    let rows = lf.target_rows(target.field_point);
    let l = lf.n_electrodes();
    let l1 = DMatrix::from_fn(3, l, |i, j| lf.matrix[(rows[i], j)]);
    let nuisance: Vec<usize> = (0..3 * np).filter(|r| !rows.contains(r)).collect();
    let l2 = DMatrix::from_fn(nuisance.len(), l, |i, j| lf.matrix[(nuisance[i], j)]);
    let x1 = DVector::from_iterator(3, target.orientation.iter().map(|o| o * target.d_target));
    let nu = x1.amax();
    StimulusProblem::new(
        l1,
        l2,
        x1,
        mu,
        gamma,
        one_norm(&lf.matrix),
        nu,
        spectral_norm(&lf.matrix),
        lf.electrode_ids.clone(),
    )
    .map_err(|e| FemError::Invalid(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_ball_mesh, generate_box_mesh, place_electrodes_with_radius, sample_field_points};

    /// Bar along x with full-face electrodes on both ends.
    pub(crate) fn bar(cells: [usize; 3], sigma: f64, z: [f64; 2]) -> (HeadMesh, ElectrodeLayout) {
        let mesh = generate_box_mesh([0.1, 0.02, 0.02], cells, sigma);
        let faces = mesh.boundary_faces();
        let mut left = Vec::new();
        let mut right = Vec::new();
        for (i, f) in faces.iter().enumerate() {
            let xs = f.nodes.map(|n| mesh.nodes[n][0]);
            if xs.iter().all(|&x| x.abs() < 1e-12) {
                left.push(i);
            } else if xs.iter().all(|&x| (x - 0.1).abs() < 1e-12) {
                right.push(i);
            }
        }
        let mut layout = ElectrodeLayout::from_face_sets(&mesh, vec![left, right], z[0]).unwrap();
        layout.electrodes[1].impedance = z[1];
        (mesh, layout)
    }

    #[test]
    fn reference_tet_stiffness() {
        // unit right tetrahedron: ∇λ = (-1,-1,-1), e1, e2, e3 and V = 1/6
        let p = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let (g, v) = shape_gradients([&p[0], &p[1], &p[2], &p[3]]).unwrap();
        assert!((v - 1.0 / 6.0).abs() < 1e-15);
        let expect = [
            [3.0, -1.0, -1.0, -1.0],
            [-1.0, 1.0, 0.0, 0.0],
            [-1.0, 0.0, 1.0, 0.0],
            [-1.0, 0.0, 0.0, 1.0],
        ];
        for i in 0..4 {
            for j in 0..4 {
                assert!((dot(&g[i], &g[j]) * v - expect[i][j] / 6.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn c_is_inverse_impedance() {
        let (mesh, layout) = bar([5, 1, 1], 1.0, [2000.0, 2000.0]);
        let sys = assemble(&mesh, &layout).unwrap();
        assert_eq!(sys.c, vec![5.0e-4, 5.0e-4]);
        for col in 0..2 {
            let s: f64 = sys.b.column(col).map(|(_, v)| v).sum();
            assert!((s - 1.0 / 2000.0).abs() < 1e-15);
        }
    }

    #[test]
    fn block_operator_annihilates_constants() {
        let (mesh, layout) = bar([6, 2, 2], 0.5, [1000.0, 3000.0]);
        let sys = assemble(&mesh, &layout).unwrap();
        let (top, bottom) = sys.apply(&vec![1.0; sys.n_nodes()], &[1.0, 1.0]);
        let scale = sys.a.values.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(top.iter().chain(&bottom).all(|v| v.abs() < 1e-10 * scale));
    }

    #[test]
    fn zero_current_gives_zero_solution() {
        let (mesh, layout) = bar([4, 1, 1], 1.0, [100.0, 100.0]);
        let sys = assemble(&mesh, &layout).unwrap();
        let sol = solve_forward(&sys, &[0.0, 0.0]).unwrap();
        assert!(sol.z.iter().chain(&sol.w).all(|&v| v == 0.0));
    }

    #[test]
    fn unbalanced_current_is_rejected() {
        let (mesh, layout) = bar([4, 1, 1], 1.0, [100.0, 100.0]);
        let sys = assemble(&mesh, &layout).unwrap();
        assert!(matches!(solve_forward(&sys, &[1.0, -0.5]), Err(FemError::Unbalanced { .. })));
    }

    #[test]
    fn bar_resistance_matches_analytic() {
        let sigma = 0.4;
        let z = [150.0, 250.0];
        let (mesh, layout) = bar([10, 2, 2], sigma, z);
        let sys = assemble(&mesh, &layout).unwrap();
        let sol = solve_forward(&sys, &[1.0, -1.0]).unwrap();
        let want = 0.1 / (sigma * 0.02 * 0.02) + z[0] + z[1];
        let got = sol.w[0] - sol.w[1];
        assert!(((got - want) / want).abs() < 0.02, "{got} vs {want}");
    }

    #[test]
    fn scaling_conductivity_and_admittance_halves_solution() {
        let (mesh, layout) = bar([6, 2, 2], 0.3, [500.0, 500.0]);
        let sys = assemble(&mesh, &layout).unwrap();
        let (mut mesh2, mut layout2) = (mesh.clone(), layout.clone());
        for s in mesh2.conductivities.values_mut() {
            *s *= 2.0;
        }
        for e in &mut layout2.electrodes {
            e.impedance /= 2.0;
        }
        let sys2 = assemble(&mesh2, &layout2).unwrap();
        let a = solve_forward(&sys, &[1e-3, -1e-3]).unwrap();
        let b = solve_forward(&sys2, &[1e-3, -1e-3]).unwrap();
        for (u, v) in a.z.iter().chain(&a.w).zip(b.z.iter().chain(&b.w)) {
            assert!((0.5 * u - v).abs() <= 1e-8 * u.abs().max(1e-6));
        }
    }

    #[test]
    fn bar_lead_field_is_axial() {
        let (mesh, layout) = bar([10, 2, 2], 0.7, [200.0, 200.0]);
        let sys = assemble(&mesh, &layout).unwrap();
        let fp = sample_field_points(&mesh, 0, 20, 11).unwrap();
        let lf = lead_field(&sys, &mesh, &fp).unwrap();
        let area = 0.02 * 0.02;
        for p in 0..fp.len() {
            let j = lf.density_at(p, &[1.0, -1.0]);
            assert!((j[0] - 1.0 / area).abs() < 1e-6 / area, "{j:?}");
            assert!(j[1].abs() < 1e-6 / area && j[2].abs() < 1e-6 / area);
            let neg = lf.density_at(p, &[-1.0, 1.0]);
            for k in 0..3 {
                assert_eq!(neg[k], -j[k]);
            }
        }
    }

    #[test]
    fn resistivity_agrees_with_forward_solve() {
        let mesh = generate_ball_mesh(&[0.09, 0.07], &[0.33, 0.1], 0.015).unwrap();
        let layout = place_electrodes_with_radius(&mesh, 6, 2000.0, 0.03).unwrap();
        let sys = assemble(&mesh, &layout).unwrap();
        let res = resistivity_matrix(&sys).unwrap();
        let asym = (&res.schur - res.schur.transpose()).amax() / res.schur.amax();
        assert!(asym < 1e-10);
        let y = [1e-3, -4e-4, 2e-4, -5e-4, 1e-4, -4e-4];
        let sol = solve_forward(&sys, &y).unwrap();
        let z = res.potentials(&y);
        let diff = norm2(&z.iter().zip(&sol.z).map(|(a, b)| a - b).collect::<Vec<_>>());
        assert!(diff <= 1e-8 * norm2(&sol.z), "{diff}");
    }

    #[test]
    fn one_norm_and_spectral_norm() {
        let m = DMatrix::from_row_slice(2, 2, &[3.0, -1.0, 4.0, 2.0]);
        assert_eq!(one_norm(&m), 7.0);
        let s = spectral_norm(&m);
        let exact = m.singular_values().max();
        assert!((s - exact).abs() < 1e-5 * exact);
    }
}
