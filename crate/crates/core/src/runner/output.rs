//! Files written for a run: accuracy matrices, metrics, parameter counts and
//! the training log.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AccuracyMatrix, MetricsReport, ParamRow, RunConfig, RunResult};
use crate::comm::EvalMode;
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const ACCURACY_FILE: &str = "accuracy_matrix.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const PARAMS_FILE: &str = "params.csv";
pub const LOG_FILE: &str = "train_log.json";

/// Contents of `metrics.json`. Holds no timings, so identical runs produce
/// identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub label: String,
    pub config: RunConfig,
    /// False when the run stopped before the end of the stream.
    pub complete: bool,
    pub steps_done: usize,
    pub reports: BTreeMap<EvalMode, MetricsReport>,
    pub matrices: BTreeMap<EvalMode, AccuracyMatrix>,
    pub params: Vec<ParamRow>,
}

/// Write every output file of a run into `dir` and return their paths.
pub fn write_outputs(dir: &Path, config: &RunConfig, result: &RunResult) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut csv = String::from("mode,t,j,modality,accuracy\n");
    for (mode, m) in &result.matrices {
        for (t, row) in m.rows.iter().enumerate() {
            for (u, a) in row.iter().enumerate() {
                let unit = m.units[u];
                let _ = writeln!(csv, "{mode},{},{},{},{a}", t + 1, unit.task, unit.modality);
            }
        }
    }
    let mut params = String::from("t,trainable,total\n");
    for p in &result.params {
        let _ = writeln!(params, "{},{},{}", p.step, p.trainable, p.total);
    }
    let metrics = MetricsFile {
        label: config.label(),
        config: config.clone(),
        complete: !result.reports.is_empty(),
        steps_done: result.log.len(),
        reports: result.reports.clone(),
        matrices: result.matrices.clone(),
        params: result.params.clone(),
    };
    let files = [
        (ACCURACY_FILE, csv.into_bytes()),
        (PARAMS_FILE, params.into_bytes()),
        (LOG_FILE, serde_json::to_string_pretty(&result.log)?.into_bytes()),
        (METRICS_FILE, serde_json::to_string_pretty(&metrics)?.into_bytes()),
    ];
    let mut out = Vec::new();
    for (name, bytes) in files {
        let p = dir.join(name);
        write_atomic(&p, &bytes)?;
        out.push(p);
    }
    Ok(out)
}

pub fn read_metrics(dir: &Path) -> Result<MetricsFile> {
    let p = dir.join(METRICS_FILE);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}
