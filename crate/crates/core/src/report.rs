//! Plot-ready CSV tables from a run directory's evaluation outputs.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{FlowsError, Result};
use crate::eval::Diagnostics;
use crate::selector::{MetricsReport, SweepRow};

pub const METRICS_FILE: &str = "metrics.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const SWEEP_FILE: &str = "sweep.json";
pub const REPORT_DIR: &str = "report";
pub const INDEX_FILE: &str = "index.csv";

/// `(file, what it shows)` for every emitted table, in emission order.
pub const TABLES: [(&str, &str); 5] = [
    ("transport_hist.csv", "histogram of anchor-to-truth transport lengths, prior anchors vs standard-normal starts"),
    ("step_sweep.csv", "headline metrics against the number of integration steps"),
    ("probe.csv", "displacement probe along the flow path at t with d = 1 - t"),
    ("horizon.csv", "best-hypothesis error statistics at each evaluation horizon"),
    ("density.csv", "metrics per scene-density bucket"),
];

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| FlowsError::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| FlowsError::Parse {
        path: path.to_path_buf(),
        offset: 0,
        message: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| FlowsError::io(format!("writing {}", path.display()), e))
}

fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let io = |e: csv::Error| FlowsError::Data(format!("writing {}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| FlowsError::io(format!("writing {}", path.display()), e))
}

#[derive(Serialize)]
struct DensityRow<'a> {
    bucket: &'a str,
    count: usize,
    min_ade: f64,
    min_fde: f64,
    miss_rate: f64,
    map: Option<f64>,
    soft_map: Option<f64>,
}

/// Writes the five tables and the index into `<run_dir>/report`, returning their paths.
///
/// Needs the metrics, diagnostics and step-sweep outputs of an evaluation;
/// if any is absent the error lists all expected files.
pub fn write_report(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let inputs = [METRICS_FILE, DIAGNOSTICS_FILE, SWEEP_FILE];
    let missing: Vec<&str> = inputs.iter().copied().filter(|f| !run_dir.join(f).is_file()).collect();
    if !missing.is_empty() {
        return Err(FlowsError::Data(format!(
            "{} lacks evaluation outputs {}; expected {} (run `eval` and `sweep-steps` first)",
            run_dir.display(),
            missing.join(", "),
            inputs.join(", ")
        )));
    }
    let metrics: MetricsReport = read_json(&run_dir.join(METRICS_FILE))?;
    let diag: Diagnostics = read_json(&run_dir.join(DIAGNOSTICS_FILE))?;
    let sweep: Vec<SweepRow> = read_json(&run_dir.join(SWEEP_FILE))?;

    let out = run_dir.join(REPORT_DIR);
    std::fs::create_dir_all(&out).map_err(|e| FlowsError::io(format!("creating {}", out.display()), e))?;
    let paths: Vec<PathBuf> = TABLES.iter().map(|(f, _)| out.join(f)).collect();

    let hist = metrics.transport.as_ref().map(|t| t.histogram.clone()).unwrap_or_default();
    write_csv(&paths[0], &["bin_lo", "bin_hi", "prior_count", "gaussian_count"], &hist)?;
    write_csv(
        &paths[1],
        &["steps", "field_evals_per_scene", "min_ade", "min_fde", "miss_rate", "map", "soft_map"],
        &sweep,
    )?;
    write_csv(&paths[2], &["t", "d", "disp_norm", "target_norm", "cosine", "l2"], &diag.probe)?;
    write_csv(
        &paths[3],
        &["horizon", "mean", "median", "p95", "p99", "cumulative_ade"],
        &metrics.horizon,
    )?;
    let density: Vec<DensityRow> = metrics
        .per_density
        .iter()
        .map(|b| DensityRow {
            bucket: &b.name,
            count: b.count,
            min_ade: b.min_ade,
            min_fde: b.min_fde,
            miss_rate: b.miss_rate,
            map: b.ap,
            soft_map: b.soft_ap,
        })
        .collect();
    write_csv(
        &paths[4],
        &["bucket", "count", "min_ade", "min_fde", "miss_rate", "map", "soft_map"],
        &density,
    )?;

    let index = out.join(INDEX_FILE);
    let rows: Vec<(&str, &str)> = TABLES.to_vec();
    write_csv(&index, &["file", "shows"], &rows)?;
    let mut all = paths;
    all.push(index);
    Ok(all)
}
