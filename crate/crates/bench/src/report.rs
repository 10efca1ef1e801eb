//! Per-cell results, aggregation over seeds, and the CSV and Markdown
//! outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use dc3::dc3::{EvalReport, Variant};
use serde::{Deserialize, Serialize};

use crate::BenchError;

/// Method label of the reference-solver row.
pub const OPTIMIZER: &str = "optimizer";

/// One `(method, seed)` evaluation. Wall time lives in [`TimingRow`] so that
/// these rows are reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub seed: u64,
    /// `ok` or `failed`.
    pub status: String,
    pub instances: usize,
    pub converged: usize,
    pub objective: Option<f64>,
    pub eq_max: Option<f64>,
    pub eq_mean: Option<f64>,
    pub ineq_max: Option<f64>,
    pub ineq_mean: Option<f64>,
    pub gap: Option<f64>,
    pub message: String,
}

impl EvalRow {
    pub fn from_report(method: &str, seed: u64, r: &EvalReport) -> Self {
        EvalRow {
            method: method.to_string(),
            seed,
            status: "ok".into(),
            instances: r.instances,
            converged: r.converged,
            objective: Some(r.objective_mean),
            eq_max: Some(r.eq_max),
            eq_mean: Some(r.eq_mean),
            ineq_max: Some(r.ineq_max),
            ineq_mean: Some(r.ineq_mean),
            gap: r.gap_mean,
            message: String::new(),
        }
    }

    pub fn failed(method: &str, seed: u64, message: String) -> Self {
        EvalRow {
            method: method.to_string(),
            seed,
            status: "failed".into(),
            instances: 0,
            converged: 0,
            objective: None,
            eq_max: None,
            eq_mean: None,
            ineq_max: None,
            ineq_mean: None,
            gap: None,
            message,
        }
    }

    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: String,
    pub seed: u64,
    pub total_seconds: f64,
    pub per_instance_seconds: f64,
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Stat { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub runs: usize,
    pub failed: usize,
    pub objective: Option<Stat>,
    pub eq_max: Option<Stat>,
    pub eq_mean: Option<Stat>,
    pub ineq_max: Option<Stat>,
    pub ineq_mean: Option<Stat>,
    pub gap: Option<Stat>,
    pub time: Option<Stat>,
}

#[derive(Serialize)]
struct SummaryCsv<'a> {
    method: &'a str,
    runs: usize,
    failed: usize,
    objective_mean: Option<f64>,
    objective_std: Option<f64>,
    eq_max_mean: Option<f64>,
    eq_max_std: Option<f64>,
    eq_mean_mean: Option<f64>,
    eq_mean_std: Option<f64>,
    ineq_max_mean: Option<f64>,
    ineq_max_std: Option<f64>,
    ineq_mean_mean: Option<f64>,
    ineq_mean_std: Option<f64>,
    gap_mean: Option<f64>,
    gap_std: Option<f64>,
}

/// Aggregate rows per method, in order of first appearance.
pub fn aggregate(rows: &[EvalRow], timings: &[TimingRow]) -> Vec<SummaryRow> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.method.as_str()) {
            order.push(&r.method);
        }
    }
    order
        .into_iter()
        .map(|method| {
            let cells: Vec<&EvalRow> = rows.iter().filter(|r| r.method == method && r.ok()).collect();
            let stat = |f: fn(&EvalRow) -> Option<f64>| Stat::of(&cells.iter().filter_map(|c| f(c)).collect::<Vec<_>>());
            let ok_seeds: Vec<u64> = cells.iter().map(|c| c.seed).collect();
            let times: Vec<f64> = timings
                .iter()
                .filter(|t| t.method == method && ok_seeds.contains(&t.seed))
                .map(|t| t.per_instance_seconds)
                .collect();
            SummaryRow {
                method: method.to_string(),
                runs: cells.len(),
                failed: rows.iter().filter(|r| r.method == method && !r.ok()).count(),
                objective: stat(|c| c.objective),
                eq_max: stat(|c| c.eq_max),
                eq_mean: stat(|c| c.eq_mean),
                ineq_max: stat(|c| c.ineq_max),
                ineq_mean: stat(|c| c.ineq_mean),
                gap: stat(|c| c.gap),
                time: Stat::of(&times),
            }
        })
        .collect()
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, BenchError> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<Result<Vec<T>, _>>()?;
    Ok(rows)
}

/// Machine-readable aggregate; wall time is left out so the file is
/// reproducible.
pub fn write_summary(path: &Path, summary: &[SummaryRow]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    for s in summary {
        let m = |x: Option<Stat>| x.map(|s| s.mean);
        let d = |x: Option<Stat>| x.map(|s| s.std);
        w.serialize(SummaryCsv {
            method: &s.method,
            runs: s.runs,
            failed: s.failed,
            objective_mean: m(s.objective),
            objective_std: d(s.objective),
            eq_max_mean: m(s.eq_max),
            eq_max_std: d(s.eq_max),
            eq_mean_mean: m(s.eq_mean),
            eq_mean_std: d(s.eq_mean),
            ineq_max_mean: m(s.ineq_max),
            ineq_max_std: d(s.ineq_max),
            ineq_mean_mean: m(s.ineq_mean),
            ineq_mean_std: d(s.ineq_mean),
            gap_mean: m(s.gap),
            gap_std: d(s.gap),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Row label used in tables.
pub fn display_name(method: &str) -> String {
    if method == OPTIMIZER {
        return "Optimizer".into();
    }
    match Variant::parse(method) {
        Some(Variant::Dc3) => "DC3",
        Some(Variant::Dc3NoCompletion) => "DC3, ≠",
        Some(Variant::Dc3NoCorrTrain) => "DC3, ≰ train",
        Some(Variant::Dc3NoCorrTrainTest) => "DC3, ≰ train/test",
        Some(Variant::Dc3NoSoftLoss) => "DC3, no soft loss",
        Some(Variant::Nn) => "NN",
        Some(Variant::NnCorrTest) => "NN, ≤ test",
        Some(Variant::EqNn) => "Eq. NN",
        Some(Variant::EqNnCorrTest) => "Eq. NN, ≤ test",
        None => method,
    }
    .into()
}

fn cell(s: Option<Stat>, digits: usize) -> String {
    match s {
        Some(s) => format!("{:.*} ({:.*})", digits, s.mean, digits, s.std),
        None => "n/a".into(),
    }
}

/// Markdown table with six metric columns, wall time per test
/// instance, and the optimality gap when a reference was available.
pub fn markdown(title: &str, summary: &[SummaryRow]) -> String {
    let gap = summary.iter().any(|s| s.gap.is_some());
    let mut out = format!("## {title}\n\n");
    out.push_str("| Method | Obj. value | Max eq. | Mean eq. | Max ineq. | Mean ineq. | Time (s) |");
    out.push_str(if gap { " Gap |\n" } else { "\n" });
    out.push_str("|---|---|---|---|---|---|---|");
    out.push_str(if gap { "---|\n" } else { "\n" });
    for s in summary {
        let _ = write!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} |",
            display_name(&s.method),
            cell(s.objective, 2),
            cell(s.eq_max, 2),
            cell(s.eq_mean, 2),
            cell(s.ineq_max, 2),
            cell(s.ineq_mean, 2),
            cell(s.time, 3),
        );
        if gap {
            let _ = write!(out, " {} |", cell(s.gap.map(|g| Stat { mean: 100.0 * g.mean, std: 100.0 * g.std }), 2));
        }
        if s.failed > 0 {
            let _ = write!(out, " {} failed", s.failed);
        }
        out.push('\n');
    }
    if gap {
        out.push_str("\nGap: mean per-instance optimality gap in percent.\n");
    }
    out
}

/// Sweep table: one column per swept value; objective, max eq. and max ineq.
/// rows per method.
pub fn sweep_markdown(axis: &str, columns: &[(usize, Vec<SummaryRow>)]) -> String {
    let mut methods: Vec<String> = Vec::new();
    for (_, rows) in columns {
        for r in rows {
            if !methods.contains(&r.method) {
                methods.push(r.method.clone());
            }
        }
    }
    let mut out = format!("## Sweep over {axis}\n\n| Method | Metric |");
    for (v, _) in columns {
        let _ = write!(out, " {axis} = {v} |");
    }
    out.push_str("\n|---|---|");
    out.push_str(&"---|".repeat(columns.len()));
    out.push('\n');
    type Pick = fn(&SummaryRow) -> Option<Stat>;
    let metrics: [(&str, Pick); 3] =
        [("Obj. val.", |r| r.objective), ("Max eq.", |r| r.eq_max), ("Max ineq.", |r| r.ineq_max)];
    for m in &methods {
        for (label, pick) in metrics {
            let _ = write!(out, "| {} | {label} |", display_name(m));
            for (_, rows) in columns {
                let s = rows.iter().find(|r| &r.method == m).and_then(pick);
                let _ = write!(out, " {} |", cell(s, 2));
            }
            out.push('\n');
        }
    }
    out
}

/// Group rows by method for quick lookups.
pub fn by_method(summary: &[SummaryRow]) -> BTreeMap<&str, &SummaryRow> {
    summary.iter().map(|s| (s.method.as_str(), s)).collect()
}
