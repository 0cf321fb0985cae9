//! Run configuration. Every field has a default, so `{}` is a valid config.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tesopt_core::lp::{DEFAULT_MAX_ITER, DEFAULT_TOL};
use tesopt_core::mesh::DEFAULT_CAP_RADIUS;
use tesopt_core::optim::{L1l2Options, Method, SolverOptions};
use tesopt_core::search::{Case, LatticeSpec, DEFAULT_THRESHOLD};

/// Lattice step of the desk-scale grid (12×12).
pub const DESK_STEP_DB: f64 = 15.0;
/// Lattice step of the full grid (36×36).
pub const FULL_STEP_DB: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshConfig {
    /// Layer radii (m), outermost first.
    pub radii: Vec<f64>,
    /// Layer conductivities (S/m).
    pub conductivities: Vec<f64>,
    /// Voxel edge (m).
    pub cell_size: f64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            radii: vec![0.09, 0.085, 0.078],
            conductivities: vec![0.33, 0.0042, 0.33],
            cell_size: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub lp_tol: f64,
    pub lp_max_iter: usize,
    pub l1l2_tol: f64,
    pub l1l2_max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let l1l2 = L1l2Options::default();
        Self {
            lp_tol: DEFAULT_TOL,
            lp_max_iter: DEFAULT_MAX_ITER,
            l1l2_tol: l1l2.tol,
            l1l2_max_iter: l1l2.max_iter,
        }
    }
}

impl SolverConfig {
    pub fn options(&self) -> SolverOptions {
        SolverOptions {
            lp_tol: self.lp_tol,
            lp_max_iter: self.lp_max_iter,
            l1l2: L1l2Options {
                tol: self.l1l2_tol,
                max_iter: self.l1l2_max_iter,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mesh: MeshConfig,
    /// Electrodes of the first (full-montage) run.
    pub electrodes: usize,
    /// Contact impedance (Ω).
    pub impedance: f64,
    /// Electrode cap radius (m).
    pub cap_radius: f64,
    pub field_points: usize,
    pub seed: u64,
    /// Compartment holding the field points; the innermost layer if unset.
    pub target_compartment: Option<u32>,
    pub target_hint: [f64; 3],
    /// Target density magnitude (A/m²).
    pub d_target: f64,
    /// Total dose (A).
    pub mu: f64,
    /// Per-electrode cap (A); must equal `mu / 2` when given.
    pub gamma: Option<f64>,
    pub methods: Vec<Method>,
    pub cases: Vec<Case>,
    pub channels: Vec<usize>,
    /// Case-A threshold on Γ (A/m²).
    pub threshold: f64,
    pub lattice_step_db: f64,
    /// Per-method lattice overrides; other methods use their default ranges
    /// at `lattice_step_db`.
    pub lattices: BTreeMap<Method, LatticeSpec>,
    pub solver: SolverConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mesh: MeshConfig::default(),
            electrodes: 32,
            impedance: 2000.0,
            cap_radius: DEFAULT_CAP_RADIUS,
            field_points: 1000,
            seed: 20_240_601,
            target_compartment: None,
            target_hint: [0.0, 0.0, 1.0],
            d_target: 0.2,
            mu: 4e-3,
            gamma: None,
            methods: Method::ALL.to_vec(),
            cases: vec![Case::A, Case::B],
            channels: vec![8, 20],
            threshold: DEFAULT_THRESHOLD,
            lattice_step_db: DESK_STEP_DB,
            lattices: BTreeMap::new(),
            solver: SolverConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Per-electrode cap `γ = μ/2`.
    pub fn gamma(&self) -> f64 {
        self.mu / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            bail!("mu must be positive, got {}", self.mu);
        }
        if let Some(g) = self.gamma {
            if (g - self.gamma()).abs() > 1e-15 * self.mu {
                bail!("gamma must equal mu/2 = {}, got {g}", self.gamma());
            }
        }
        if self.electrodes < 2 {
            bail!("at least two electrodes are required");
        }
        if let Some(&k) = self.channels.iter().find(|&&k| k < 2 || k > self.electrodes) {
            bail!("channel count {k} outside 2..={}", self.electrodes);
        }
        if !(self.threshold.is_finite()) {
            bail!("threshold must be finite");
        }
        if !(self.d_target > 0.0 && self.d_target.is_finite()) {
            bail!("d_target must be positive");
        }
        for m in &self.methods {
            self.lattice(*m).dims().with_context(|| format!("lattice of {m}"))?;
        }
        Ok(())
    }

    pub fn lattice(&self, method: Method) -> LatticeSpec {
        self.lattices
            .get(&method)
            .copied()
            .unwrap_or_else(|| LatticeSpec::default_for(method, self.lattice_step_db))
    }

    pub fn target_compartment(&self) -> u32 {
        self.target_compartment
            .unwrap_or(self.mesh.radii.len().saturating_sub(1) as u32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.electrodes, 32);
        assert_eq!(cfg.impedance, 2000.0);
        assert_eq!(cfg.field_points, 1000);
        assert_eq!(cfg.mu, 4e-3);
        assert_eq!(cfg.gamma(), 2e-3);
        assert_eq!(cfg.channels, vec![8, 20]);
        assert_eq!(cfg.threshold, 0.11);
        assert_eq!(cfg.target_compartment(), 2);
        cfg.validate().unwrap();
    }

    #[test]
    fn desk_lattices_are_twelve_square() {
        let cfg = RunConfig::default();
        for m in Method::ALL {
            assert_eq!(cfg.lattice(m).dims().unwrap(), (12, 12));
        }
    }

    #[test]
    fn gamma_must_be_half_mu() {
        let cfg: RunConfig = serde_json::from_str(r#"{"mu": 0.004, "gamma": 0.003}"#).unwrap();
        assert!(cfg.validate().is_err());
        let cfg: RunConfig = serde_json::from_str(r#"{"mu": 0.004, "gamma": 0.002}"#).unwrap();
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"electrode": 8}"#).is_err());
    }

    #[test]
    fn lattice_override() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"lattices": {"tls": {"alpha_db_min": -100, "alpha_db_max": -90,
                "weight_db_min": 0, "weight_db_max": 10, "step_db": 10}}}"#,
        )
        .unwrap();
        assert_eq!(cfg.lattice(Method::Tls).dims().unwrap(), (1, 1));
        assert_eq!(cfg.lattice(Method::L1l1).dims().unwrap(), (12, 12));
    }
}
