//! Tables and curve data rendered from run reports.

use std::path::Path;

use ndarray::Array2;
use serde::Serialize;

use super::run::{RunReport, REPORT_FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::io::{write_json, write_matrix_csv};

/// Baseline columns of `metrics.csv`, in order.
pub const BASELINE_METHODS: [&str; 3] = ["map-correlated", "map-identity", "prior-mean"];

#[derive(Serialize)]
struct MetricsRow<'a> {
    run: &'a str,
    problem: &'a str,
    prior: &'a str,
    architecture: &'a str,
    objective: &'a str,
    seed: u64,
    e_rel: Option<f64>,
    e_rel_map_correlated: Option<f64>,
    e_rel_map_identity: Option<f64>,
    e_rel_prior_mean: Option<f64>,
}

/// Writes `metrics.csv` (one row per report), `reconstructions.csv` (one row
/// per parameter component, one column per report and method) and `meta.json`.
pub fn report_emit(reports: &[RunReport], dir: &Path) -> Result<()> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Config("report_emit needs at least one report".into()))?;
    if let Some(r) = reports.iter().find(|r| r.problem != first.problem) {
        return Err(Error::Config(format!(
            "reports mix problems {} and {}",
            first.problem, r.problem
        )));
    }
    std::fs::create_dir_all(dir)?;

    let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
    for r in reports {
        let e = |name: &str| r.method(name).map(|m| m.e_rel);
        w.serialize(MetricsRow {
            run: &r.name,
            problem: r.problem.as_str(),
            prior: r.prior.as_str(),
            architecture: r.architecture.as_deref().unwrap_or("none"),
            objective: r.objective.as_deref().unwrap_or("none"),
            seed: r.seeds.data,
            e_rel: e("network"),
            e_rel_map_correlated: e(BASELINE_METHODS[0]),
            e_rel_map_identity: e(BASELINE_METHODS[1]),
            e_rel_prior_mean: e(BASELINE_METHODS[2]),
        })?;
    }
    w.flush()?;

    let n = first.m_true.len();
    let mut header = vec!["x".to_string(), "z".to_string(), "m_true".to_string()];
    let mut columns: Vec<&[f64]> = vec![&first.m_true];
    for r in reports {
        if r.m_true.len() != n {
            return Err(Error::ShapeMismatch(format!("report {} has {} components, expected {n}", r.name, r.m_true.len())));
        }
        for m in &r.methods {
            header.push(format!("{}/{}", r.name, m.method));
            columns.push(&m.m_hat);
        }
    }
    let mut table = Array2::zeros((n, 2 + columns.len()));
    for j in 0..n {
        table[[j, 0]] = first.coords[j][0];
        table[[j, 1]] = first.coords[j][1];
        for (c, col) in columns.iter().enumerate() {
            table[[j, 2 + c]] = col[j];
        }
    }
    write_matrix_csv(&dir.join("reconstructions.csv"), &table, Some(&header))?;

    write_json(
        &dir.join("meta.json"),
        &serde_json::json!({
            "format_version": REPORT_FORMAT_VERSION,
            "problem": first.problem,
            "error_space": first.error_space,
            "runs": reports.iter().map(|r| serde_json::json!({
                "name": r.name,
                "seeds": r.seeds,
                "config": r.config,
                "training": r.training,
            })).collect::<Vec<_>>(),
        }),
    )
}
