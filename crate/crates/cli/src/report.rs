//! Summary table of a results file: one row per record with value and
//! deviation of ‖y‖∞ (mA), Γ (A/m²), AD (deg) and Θ.

use anyhow::Result;

use crate::results::{ResultRecord, ResultsFile};

pub const CSV_HEADER: [&str; 12] = [
    "method",
    "case",
    "channels",
    "status",
    "max_current_ma",
    "max_current_ma_dev",
    "gamma",
    "gamma_dev",
    "ad_deg",
    "ad_deg_dev",
    "theta",
    "theta_dev",
];

/// One table row: `(value, deviation)` pairs in column order.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub case: String,
    pub channels: usize,
    pub status: String,
    pub values: [(Option<f64>, Option<f64>); 4],
}

pub fn rows(results: &ResultsFile) -> Vec<ReportRow> {
    results.records.iter().map(row).collect()
}

fn row(r: &ResultRecord) -> ReportRow {
    let dev = r.deviation.as_ref();
    let sel = r.run2.as_ref();
    let status = serde_json::to_value(r.status)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default();
    ReportRow {
        method: r.method.as_str().to_uppercase(),
        case: r.case.to_string(),
        channels: r.channels,
        status,
        values: [
            (sel.map(|s| s.max_current_ma), dev.and_then(|d| d.max_current_ma)),
            (sel.map(|s| s.gamma), dev.and_then(|d| d.gamma)),
            (sel.and_then(|s| s.ad_deg), dev.and_then(|d| d.ad_deg)),
            (sel.and_then(|s| s.theta), dev.and_then(|d| d.theta)),
        ],
    }
}

fn cell(v: Option<f64>, decimals: usize) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.decimals$}"))
}

const DECIMALS: [usize; 4] = [2, 3, 1, 2];

pub fn render_text(results: &ResultsFile) -> String {
    let header = [
        "Method", "Case", "Chn", "|y|inf mA", "dev", "Gamma A/m2", "dev", "AD deg", "dev", "Theta", "dev", "Status",
    ];
    let mut table: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in rows(results) {
        let mut line = vec![r.method, r.case, r.channels.to_string()];
        for ((v, d), dec) in r.values.iter().zip(DECIMALS) {
            line.push(cell(*v, dec));
            line.push(cell(*d, dec));
        }
        line.push(r.status);
        table.push(line);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| table.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for line in &table {
        let cells: Vec<String> = line
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, w))| if c < 3 || c == 11 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

pub fn render_csv(results: &ResultsFile) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in rows(results) {
        let mut rec = vec![r.method, r.case, r.channels.to_string(), r.status];
        for (v, d) in r.values {
            rec.push(v.map_or(String::new(), |v| v.to_string()));
            rec.push(d.map_or(String::new(), |v| v.to_string()));
        }
        w.write_record(&rec)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::results::{RecordStatus, Selection};
    use tesopt_core::optim::Method;
    use tesopt_core::search::Case;

    fn record(max_current_ma: f64) -> ResultRecord {
        let sel = Selection {
            cell: [0, 0],
            alpha_db: -20.0,
            weight_db: 0.0,
            max_current_ma,
            gamma: 0.123,
            ad_deg: Some(1.25),
            theta: Some(3.5),
            theta_sentinel: false,
            y_ma: vec![max_current_ma, -max_current_ma],
        };
        ResultRecord {
            method: Method::L1l1,
            case: Case::A,
            channels: 8,
            status: RecordStatus::Ok,
            message: None,
            run1: Some(sel.clone()),
            run2: Some(sel),
            montage: vec![1, 2],
            deviation: None,
        }
    }

    #[test]
    fn one_record_one_row() {
        let f = ResultsFile::new(1, vec![record(2.0)]);
        let text = render_text(&f);
        assert_eq!(text.lines().count(), 2);
        let csv = render_csv(&f).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with("method,case,channels,status,max_current_ma"));
    }

    #[test]
    fn milliamp_formatting() {
        // 2.0e-3 A is stored as 2.0 mA and printed with two decimals
        let f = ResultsFile::new(1, vec![record(2.0e-3 * 1e3)]);
        let text = render_text(&f);
        let row = text.lines().nth(1).unwrap();
        assert!(row.split_whitespace().any(|c| c == "2.00"), "{row}");
    }

    #[test]
    fn empty_results_give_header_only() {
        let f = ResultsFile::new(1, vec![]);
        assert_eq!(render_text(&f).lines().count(), 1);
        assert_eq!(render_csv(&f).unwrap().lines().count(), 1);
    }

    #[test]
    fn failed_records_show_dashes() {
        let r = ResultRecord::failed(Method::Tls, Case::A, 20, RecordStatus::NoFeasibleCandidate, "x".into());
        let text = render_text(&ResultsFile::new(1, vec![r]));
        let row = text.lines().nth(1).unwrap();
        assert!(row.contains("no_feasible_candidate"));
        assert_eq!(row.split_whitespace().filter(|c| *c == "-").count(), 8);
    }
}
