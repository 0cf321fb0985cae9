//! Artifact layout and the mesh → lead field → search pipeline.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tesopt_core::fem::{assemble, lead_field, one_norm, spectral_norm, split_problem, LeadField};
use tesopt_core::io::{read_json, read_lead_field, write_json, write_lattice_csv, write_lead_field, LeadFieldSidecar};
use tesopt_core::mesh::{
    generate_ball_mesh, place_electrodes_with_radius, place_target, sample_field_points, ElectrodeLayout, FieldPointSet,
    HeadMesh, TargetSpec,
};
use tesopt_core::metrics::{evaluate, MetricSet};
use tesopt_core::optim::{solve, Method, MethodParams, SolveStatus, StimulusProblem};
use tesopt_core::search::{
    evaluate_lattice, finish_search, second_run_problem, CandidateGrid, SearchError, SearchSettings,
};

use crate::config::RunConfig;
use crate::results::{finite, RecordStatus, ResultRecord, ResultsFile};

/// File names inside the output directory.
#[derive(Debug, Clone)]
pub struct Paths {
    pub out: PathBuf,
}

impl Paths {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self { out: out.into() }
    }

    pub fn mesh(&self) -> PathBuf {
        self.out.join("mesh.json")
    }

    pub fn electrodes(&self) -> PathBuf {
        self.out.join("electrodes.json")
    }

    pub fn field_points(&self) -> PathBuf {
        self.out.join("field_points.json")
    }

    pub fn target(&self) -> PathBuf {
        self.out.join("target.json")
    }

    pub fn lead_field(&self) -> PathBuf {
        self.out.join("leadfield.bin")
    }

    pub fn lead_field_sidecar(&self) -> PathBuf {
        self.out.join("leadfield.json")
    }

    pub fn results(&self) -> PathBuf {
        self.out.join("results.json")
    }

    pub fn timings(&self) -> PathBuf {
        self.out.join("timings.json")
    }

    pub fn lattice_csv(&self, name: &str) -> PathBuf {
        self.out.join("lattices").join(format!("{name}.csv"))
    }

    pub fn optimize(&self, method: Method) -> PathBuf {
        self.out.join(format!("optimize_{method}.json"))
    }

    pub fn report_text(&self) -> PathBuf {
        self.out.join("report.txt")
    }

    pub fn report_csv(&self) -> PathBuf {
        self.out.join("report.csv")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshArtifacts {
    pub mesh: HeadMesh,
    pub layout: ElectrodeLayout,
    pub field_points: FieldPointSet,
    pub target: TargetSpec,
}

pub fn build_mesh(cfg: &RunConfig) -> Result<MeshArtifacts> {
    cfg.validate()?;
    let m = &cfg.mesh;
    let mesh = generate_ball_mesh(&m.radii, &m.conductivities, m.cell_size).context("generating mesh")?;
    let layout = place_electrodes_with_radius(&mesh, cfg.electrodes, cfg.impedance, cfg.cap_radius)
        .context("placing electrodes")?;
    let field_points = sample_field_points(&mesh, cfg.target_compartment(), cfg.field_points, cfg.seed)
        .context("sampling field points")?;
    let target = place_target(&field_points, cfg.target_hint, cfg.d_target).context("placing target")?;
    Ok(MeshArtifacts {
        mesh,
        layout,
        field_points,
        target,
    })
}

pub fn write_mesh(paths: &Paths, art: &MeshArtifacts) -> Result<()> {
    write_json(&paths.mesh(), &art.mesh)?;
    write_json(&paths.electrodes(), &art.layout)?;
    write_json(&paths.field_points(), &art.field_points)?;
    write_json(&paths.target(), &art.target)?;
    Ok(())
}

pub fn read_mesh(paths: &Paths) -> Result<MeshArtifacts> {
    let art = MeshArtifacts {
        mesh: read_json(&paths.mesh())?,
        layout: read_json(&paths.electrodes())?,
        field_points: read_json(&paths.field_points())?,
        target: read_json(&paths.target())?,
    };
    art.mesh.validate().context("mesh file")?;
    art.layout.validate(&art.mesh).context("electrode file")?;
    if art.field_points.tets.len() != art.field_points.points.len()
        || art.field_points.tets.iter().any(|&t| t >= art.mesh.tets.len())
    {
        bail!("field point file does not match the mesh");
    }
    Ok(art)
}

pub fn cmd_mesh(cfg: &RunConfig, paths: &Paths) -> Result<MeshArtifacts> {
    let art = build_mesh(cfg)?;
    write_mesh(paths, &art)?;
    Ok(art)
}

pub fn compute_lead_field(art: &MeshArtifacts) -> Result<(LeadField, LeadFieldSidecar)> {
    let sys = assemble(&art.mesh, &art.layout).context("assembling the CEM system")?;
    let lf = lead_field(&sys, &art.mesh, &art.field_points).context("computing the lead field")?;
    let target = art.target.clone();
    let np = lf.n_points();
    if target.field_point >= np {
        bail!("target field point {} outside {np} field points", target.field_point);
    }
    let sidecar = LeadFieldSidecar {
        rows: lf.matrix.nrows(),
        cols: lf.matrix.ncols(),
        electrode_ids: lf.electrode_ids.clone(),
        points: lf.points.clone(),
        target_rows: lf.target_rows(target.field_point),
        zeta: one_norm(&lf.matrix),
        nu: target.orientation.iter().fold(0.0, |m: f64, o| m.max((o * target.d_target).abs())),
        sigma_scale: spectral_norm(&lf.matrix),
        target,
    };
    Ok((lf, sidecar))
}

/// Reads the mesh artifacts and writes the lead field with its sidecar.
pub fn cmd_leadfield(paths: &Paths) -> Result<(LeadField, LeadFieldSidecar)> {
    let art = read_mesh(paths)?;
    let (lf, sidecar) = compute_lead_field(&art)?;
    write_lead_field(&paths.lead_field(), &paths.lead_field_sidecar(), &lf, &sidecar)?;
    Ok((lf, sidecar))
}

/// Problem built from a lead field and its sidecar; the stored scales are
/// used as they are.
pub fn problem_from(cfg: &RunConfig, lf: &LeadField, sidecar: &LeadFieldSidecar) -> Result<StimulusProblem> {
    let mut p = split_problem(lf, &sidecar.target, cfg.mu, cfg.gamma()).context("splitting the lead field")?;
    p.zeta = sidecar.zeta;
    p.nu = sidecar.nu;
    p.sigma_scale = sidecar.sigma_scale;
    Ok(p)
}

pub fn load_problem(cfg: &RunConfig, paths: &Paths) -> Result<StimulusProblem> {
    let (lf, sidecar) = read_lead_field(&paths.lead_field(), &paths.lead_field_sidecar())?;
    problem_from(cfg, &lf, &sidecar)
}

/// Output of a single solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeRecord {
    pub method: Method,
    pub alpha_db: f64,
    pub weight_db: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub electrode_ids: Vec<u32>,
    pub y_ma: Vec<f64>,
    pub max_current_ma: f64,
    pub gamma: Option<f64>,
    pub theta: Option<f64>,
    pub ad_deg: Option<f64>,
}

pub fn optimize(p: &StimulusProblem, cfg: &RunConfig, method: Method, params: MethodParams) -> OptimizeRecord {
    let out = solve(method, p, params, &cfg.solver.options());
    let m: Option<MetricSet> = out.is_valid().then(|| evaluate(p, &out.y).ok()).flatten();
    OptimizeRecord {
        method,
        alpha_db: params.alpha_db,
        weight_db: params.weight_db,
        status: out.status,
        iterations: out.iterations,
        electrode_ids: out.electrode_ids.clone(),
        y_ma: out.y.iter().map(|v| v * 1e3).collect(),
        max_current_ma: out.max_current() * 1e3,
        gamma: m.and_then(|m| finite(m.gamma)),
        theta: m.and_then(|m| finite(m.theta)),
        ad_deg: m.and_then(|m| finite(m.ad_deg)),
    }
}

pub fn cmd_optimize(cfg: &RunConfig, paths: &Paths, method: Method, params: MethodParams) -> Result<OptimizeRecord> {
    let p = load_problem(cfg, paths)?;
    let rec = optimize(&p, cfg, method, params);
    write_json(&paths.optimize(method), &rec)?;
    Ok(rec)
}

/// Wall-clock seconds per stage; kept apart from `results.json` so that the
/// results stay reproducible byte for byte.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    /// `<method>/run1` and `<method>/run2/<montage ids>` lattice sweeps.
    pub lattices: BTreeMap<String, f64>,
    /// Accumulated sweep time per method.
    pub methods: BTreeMap<String, f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchRun {
    pub results: ResultsFile,
    pub timings: Timings,
    /// Lattices by CSV name.
    pub grids: BTreeMap<String, CandidateGrid>,
}

impl SearchRun {
    /// All records succeeded.
    pub fn all_ok(&self) -> bool {
        self.results.records.iter().all(|r| r.status == RecordStatus::Ok)
    }
}

fn montage_key(ids: &[u32]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("-")
}

/// Runs the two-run search for every configured (method, case, channels).
/// The first-run lattice is shared by all cases and channel counts of a
/// method; second-run lattices are shared between identical montages.
pub fn run_search(cfg: &RunConfig, p: &StimulusProblem) -> Result<SearchRun> {
    cfg.validate()?;
    let opts = cfg.solver.options();
    let start = Instant::now();
    let mut records = Vec::new();
    let mut timings = Timings::default();
    let mut grids = BTreeMap::new();
    for &method in &cfg.methods {
        let spec = cfg.lattice(method);
        let t = Instant::now();
        let run1 = evaluate_lattice(p, method, &spec, &opts)?;
        let secs = t.elapsed().as_secs_f64();
        timings.lattices.insert(format!("{method}/run1"), secs);
        *timings.methods.entry(method.to_string()).or_default() += secs;
        let mut run2_cache: BTreeMap<Vec<u32>, CandidateGrid> = BTreeMap::new();
        for &case in &cfg.cases {
            for &k in &cfg.channels {
                let settings = SearchSettings {
                    case,
                    channels: k,
                    threshold: cfg.threshold,
                };
                let outcome = second_run_problem(p, &run1, &settings).and_then(|(p2, cell1, montage)| {
                    if !run2_cache.contains_key(&montage) {
                        let t = Instant::now();
                        let grid = evaluate_lattice(&p2, method, &spec, &opts)?;
                        let secs = t.elapsed().as_secs_f64();
                        timings.lattices.insert(format!("{method}/run2/{}", montage_key(&montage)), secs);
                        *timings.methods.entry(method.to_string()).or_default() += secs;
                        run2_cache.insert(montage.clone(), grid);
                    }
                    let run2 = &run2_cache[&montage];
                    grids.insert(format!("{method}_{case}_k{k}_run2"), run2.clone());
                    finish_search(p, &run1, run2, cell1, montage, &settings)
                });
                records.push(match outcome {
                    Ok(o) => ResultRecord::from_outcome(&o),
                    Err(e @ SearchError::NoFeasibleCandidate { .. }) => {
                        ResultRecord::failed(method, case, k, RecordStatus::NoFeasibleCandidate, e.to_string())
                    }
                    Err(e @ SearchError::NoValidCell { .. }) => {
                        ResultRecord::failed(method, case, k, RecordStatus::NoValidCell, e.to_string())
                    }
                    Err(e) => return Err(e).with_context(|| format!("{method} case {case} k={k}")),
                });
            }
        }
        grids.insert(format!("{method}_run1"), run1);
    }
    timings.total = start.elapsed().as_secs_f64();
    Ok(SearchRun {
        results: ResultsFile::new(cfg.seed, records),
        timings,
        grids,
    })
}

pub fn write_search(paths: &Paths, run: &SearchRun) -> Result<()> {
    write_json(&paths.results(), &run.results)?;
    write_json(&paths.timings(), &run.timings)?;
    for (name, grid) in &run.grids {
        write_lattice_csv(&paths.lattice_csv(name), grid)?;
    }
    Ok(())
}

pub fn cmd_search(cfg: &RunConfig, paths: &Paths) -> Result<SearchRun> {
    let p = load_problem(cfg, paths)?;
    let run = run_search(cfg, &p)?;
    write_search(paths, &run)?;
    Ok(run)
}
