//! JSON-lines metrics to plot-ready CSV tables.

use std::fmt::Write as _;
use std::path::Path;

use bevkd::trainer::StepMetrics;
use serde::Serialize;

use crate::CliError;

pub const CURVE_COLUMNS: [&str; 13] = [
    "step",
    "L_det",
    "L_AFD",
    "L_PFD",
    "L_total",
    "ar_cosine",
    "active_ratio_l",
    "active_ratio_l1",
    "n_ar",
    "n_ir",
    "n_tp",
    "n_fp",
    "n_fn",
];

const HIST_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnSummary {
    pub column: String,
    pub first: f64,
    pub last: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportTables {
    pub rows: usize,
    pub columns: Vec<ColumnSummary>,
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::Config(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn curves_csv(rows: &[StepMetrics]) -> String {
    let mut s = CURVE_COLUMNS.join(",");
    s.push('\n');
    for m in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            m.step,
            m.l_det,
            m.l_afd,
            m.l_pfd,
            m.l_total,
            fmt_opt(m.ar_cosine),
            m.active_ratio_l,
            m.active_ratio_l1,
            m.n_ar,
            m.n_ir,
            m.n_tp,
            m.n_fp,
            m.n_fn
        );
    }
    s
}

fn region_series(rows: &[StepMetrics]) -> [(&'static str, Vec<f64>); 5] {
    let col = |f: fn(&StepMetrics) -> usize| rows.iter().map(|m| f(m) as f64).collect();
    [
        ("AR", col(|m| m.n_ar)),
        ("IR", col(|m| m.n_ir)),
        ("TP", col(|m| m.n_tp)),
        ("FP", col(|m| m.n_fp)),
        ("FN", col(|m| m.n_fn)),
    ]
}

/// Equal-width histograms of per-step region sizes, `HIST_BINS` bins per region.
pub fn region_hist_csv(rows: &[StepMetrics]) -> String {
    let mut s = String::from("region,bin_lower,bin_upper,count\n");
    if rows.is_empty() {
        return s;
    }
    for (name, v) in region_series(rows) {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let bins = if hi > lo { HIST_BINS } else { 1 };
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let mut counts = vec![0usize; bins];
        for x in &v {
            let b = (((x - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        for (b, c) in counts.iter().enumerate() {
            let _ = writeln!(s, "{name},{},{},{c}", lo + b as f64 * width, lo + (b + 1) as f64 * width);
        }
    }
    s
}

type Column = (&'static str, fn(&StepMetrics) -> Option<f64>);

fn summarize(rows: &[StepMetrics]) -> Vec<ColumnSummary> {
    let cols: [Column; 7] = [
        ("L_det", |m| Some(m.l_det)),
        ("L_AFD", |m| Some(m.l_afd)),
        ("L_PFD", |m| Some(m.l_pfd)),
        ("L_total", |m| Some(m.l_total)),
        ("ar_cosine", |m| m.ar_cosine),
        ("active_ratio_l", |m| Some(m.active_ratio_l)),
        ("active_ratio_l1", |m| Some(m.active_ratio_l1)),
    ];
    cols.iter()
        .filter_map(|(name, f)| {
            let v: Vec<f64> = rows.iter().filter_map(f).collect();
            Some(ColumnSummary {
                column: name.to_string(),
                first: *v.first()?,
                last: *v.last()?,
                min: v.iter().copied().fold(f64::INFINITY, f64::min),
                max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            })
        })
        .collect()
}

/// Writes `curves.csv`, `regions.csv` and `report.json` into `out_dir`.
pub fn cmd_report(metrics: &Path, out_dir: &Path) -> Result<ReportTables, CliError> {
    let rows = read_metrics(metrics)?;
    if !out_dir.as_os_str().is_empty() {
        std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    }
    let write = |name: &str, body: String| {
        let p = out_dir.join(name);
        std::fs::write(&p, body).map_err(|e| CliError::io(&p, e))
    };
    write("curves.csv", curves_csv(&rows))?;
    write("regions.csv", region_hist_csv(&rows))?;
    let tables = ReportTables {
        rows: rows.len(),
        columns: summarize(&rows),
    };
    write(
        "report.json",
        format!("{}\n", serde_json::to_string_pretty(&tables).expect("report serializes")),
    )?;
    Ok(tables)
}
