//! Command-line driver: configuration, the artifact pipeline and reports.

pub mod config;
pub mod pipeline;
pub mod report;
pub mod results;

use anyhow::Result;

use pipeline::Paths;
use results::read_results;

/// Process exit codes.
pub const EXIT_OK: u8 = 0;
pub const EXIT_ERROR: u8 = 1;
pub const EXIT_NO_FEASIBLE: u8 = 2;

/// Validates `results.json` and writes the text and CSV summaries; returns
/// the text table.
pub fn cmd_report(paths: &Paths) -> Result<String> {
    let results = read_results(&paths.results())?;
    let text = report::render_text(&results);
    let csv = report::render_csv(&results)?;
    std::fs::write(paths.report_text(), &text)?;
    std::fs::write(paths.report_csv(), csv)?;
    Ok(text)
}

/// Sizes the global thread pool from `TESOPT_THREADS` when set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("TESOPT_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("TESOPT_THREADS must be a positive integer, got '{v}'"))?;
        if n == 0 {
            anyhow::bail!("TESOPT_THREADS must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}
