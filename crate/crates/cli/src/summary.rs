//! Mean ± std tables over evaluation reports.

use std::path::Path;

use unlearn_core::metrics::EvalReport;

use crate::error::{CliError, CliResult};

/// Mean and sample standard deviation; `None` for an empty slice.
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, var.sqrt()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub label: String,
    pub n: usize,
    pub id: Option<(f64, f64)>,
    pub id_others: Option<(f64, f64)>,
    pub frechet_pre: Option<(f64, f64)>,
    pub delta_frechet_real: Option<(f64, f64)>,
}

impl SummaryRow {
    pub fn from_reports(label: &str, reports: &[EvalReport]) -> Self {
        let col = |f: &dyn Fn(&EvalReport) -> Option<f64>| -> Option<(f64, f64)> {
            let xs: Vec<f64> = reports.iter().filter_map(f).collect();
            mean_std(&xs)
        };
        SummaryRow {
            label: label.to_string(),
            n: reports.len(),
            id: col(&|r| Some(r.metrics.id)),
            id_others: col(&|r| r.metrics.id_others),
            frechet_pre: col(&|r| Some(r.metrics.frechet_pre)),
            delta_frechet_real: col(&|r| Some(r.metrics.delta_frechet_real)),
        }
    }
}

fn cells(v: Option<(f64, f64)>) -> String {
    match v {
        Some((m, s)) => format!("{m:.6},{s:.6}"),
        None => ",".into(),
    }
}

pub const SUMMARY_HEADER: &str =
    "id_mean,id_std,id_others_mean,id_others_std,frechet_pre_mean,frechet_pre_std,delta_frechet_real_mean,delta_frechet_real_std";

pub fn render_summary(key: &str, rows: &[SummaryRow]) -> String {
    let mut text = format!("{key},n,{SUMMARY_HEADER}\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.label,
            r.n,
            cells(r.id),
            cells(r.id_others),
            cells(r.frechet_pre),
            cells(r.delta_frechet_real)
        ));
    }
    text
}

pub fn write_summary(path: &Path, key: &str, rows: &[SummaryRow]) -> CliResult<()> {
    std::fs::write(path, render_summary(key, rows)).map_err(|e| CliError::io(path, e))
}
