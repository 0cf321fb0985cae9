use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use tesopt_core::optim::{Method, MethodParams};
use tesopt_core::search::Case;

use tesopt_cli::config::{RunConfig, FULL_STEP_DB};
use tesopt_cli::pipeline::{cmd_leadfield, cmd_mesh, cmd_optimize, cmd_search, Paths};
use tesopt_cli::{cmd_report, init_threads, EXIT_ERROR, EXIT_NO_FEASIBLE, EXIT_OK};

#[derive(Parser)]
#[command(name = "tesopt", version, about = "Focal multi-channel tES current optimization")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Field-point seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Methods to run (comma separated: l1l1, l1l2, tls).
    #[arg(long, global = true, value_delimiter = ',')]
    method: Vec<Method>,
    /// Cases to run (comma separated: A, B).
    #[arg(long, global = true, value_delimiter = ',')]
    case: Vec<Case>,
    /// Second-run channel counts (comma separated).
    #[arg(long, global = true, value_delimiter = ',')]
    channels: Vec<usize>,
    /// Lattice step in dB for the default per-method ranges.
    #[arg(long, global = true)]
    lattice_step_db: Option<f64>,
    /// Use the full 36×36 lattice (5 dB step).
    #[arg(long, global = true)]
    full_lattice: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the head mesh, electrodes, field points and target.
    Mesh,
    /// Compute the lead field from the mesh artifacts.
    Leadfield,
    /// Solve once at given dB levels.
    Optimize {
        #[arg(long, allow_hyphen_values = true)]
        alpha_db: f64,
        #[arg(long, allow_hyphen_values = true)]
        weight_db: f64,
    },
    /// Two-run lattice search for every method, case and channel count.
    Search,
    /// Summarize results.json as text and CSV.
    Report,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if !self.method.is_empty() {
            cfg.methods = self.method.clone();
        }
        if !self.case.is_empty() {
            cfg.cases = self.case.clone();
        }
        if !self.channels.is_empty() {
            cfg.channels = self.channels.clone();
        }
        if let Some(step) = self.lattice_step_db {
            cfg.lattice_step_db = step;
        }
        if self.full_lattice {
            cfg.lattice_step_db = FULL_STEP_DB;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<u8> {
    init_threads()?;
    let paths = Paths::new(&cli.common.out_dir);
    match cli.command {
        Command::Mesh => {
            let art = cmd_mesh(&cli.common.config()?, &paths)?;
            println!(
                "mesh: {} nodes, {} tets, {} electrodes, {} field points, target at point {}",
                art.mesh.nodes.len(),
                art.mesh.tets.len(),
                art.layout.len(),
                art.field_points.len(),
                art.target.field_point
            );
        }
        Command::Leadfield => {
            let (lf, side) = cmd_leadfield(&paths)?;
            println!(
                "lead field: {}×{}, zeta {:.6e}, nu {:.6e}, sigma {:.6e}",
                lf.matrix.nrows(),
                lf.matrix.ncols(),
                side.zeta,
                side.nu,
                side.sigma_scale
            );
        }
        Command::Optimize { alpha_db, weight_db } => {
            let cfg = cli.common.config()?;
            let params = MethodParams::new(alpha_db, weight_db)?;
            let methods = if cli.common.method.is_empty() { cfg.methods.clone() } else { cli.common.method.clone() };
            for method in methods {
                let rec = cmd_optimize(&cfg, &paths, method, params)?;
                println!(
                    "{method}: status {:?}, max current {:.3} mA, gamma {:?}, theta {:?}, AD {:?}",
                    rec.status, rec.max_current_ma, rec.gamma, rec.theta, rec.ad_deg
                );
            }
        }
        Command::Search => {
            let run = cmd_search(&cli.common.config()?, &paths)?;
            print!("{}", tesopt_cli::report::render_text(&run.results));
            println!("total {:.1} s", run.timings.total);
            if !run.all_ok() {
                eprintln!("no feasible candidate for at least one search");
                return Ok(EXIT_NO_FEASIBLE);
            }
        }
        Command::Report => {
            print!("{}", cmd_report(&paths).context("report")?);
        }
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
