//! Comparison tables and plot data over finished runs.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use comm_core::comm::EvalMode;
use comm_core::io::write_atomic;
use comm_core::runner::{read_metrics, Metrics, MetricsFile};
use comm_core::synth::Modality;

use crate::{Manifest, Status, UsageError};

pub const FAA_FILE: &str = "faa_by_step.csv";

pub struct RunSummary {
    pub name: String,
    pub world_seed: u64,
    pub metrics: MetricsFile,
}

pub struct Report {
    pub table: String,
    pub plot_data: PathBuf,
    /// Directories left out because their run did not finish.
    pub skipped: Vec<PathBuf>,
}

pub fn load_run(dir: &Path) -> anyhow::Result<Option<RunSummary>> {
    let manifest = Manifest::read(dir)?;
    if manifest.status != Status::Complete {
        return Ok(None);
    }
    let metrics = read_metrics(dir)?;
    if !metrics.complete {
        return Ok(None);
    }
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(Some(RunSummary {
        name,
        world_seed: manifest.world_seed,
        metrics,
    }))
}

fn cell(x: Option<&Metrics>) -> [String; 3] {
    match x {
        Some(m) => [
            format!("{:.2}", 100.0 * m.aia),
            format!("{:.2}", 100.0 * m.faa),
            if m.forgetting_defined {
                format!("{:.2}", 100.0 * m.forgetting)
            } else {
                "-".into()
            },
        ],
        None => ["-".into(), "-".into(), "-".into()],
    }
}

/// Aligned text table: one row per run and evaluation mode, AIA/FAA/F in
/// percent per modality and overall.
pub fn render_table(runs: &[RunSummary]) -> String {
    let mut out = String::new();
    let seeds: BTreeSet<u64> = runs.iter().map(|r| r.world_seed).collect();
    if seeds.len() > 1 {
        let _ = writeln!(out, "WARNING: runs come from different worlds (world seeds {seeds:?}); rows are not comparable\n");
    }
    let mut header = vec!["run".to_string(), "mode".to_string()];
    for group in Modality::ALL.iter().map(|m| m.name().to_string()).chain(["overall".to_string()]) {
        for metric in ["AIA", "FAA", "F"] {
            header.push(format!("{group} {metric}"));
        }
    }
    let mut rows = vec![header];
    for r in runs {
        for (mode, rep) in &r.metrics.reports {
            let mut row = vec![r.name.clone(), mode.to_string()];
            for m in Modality::ALL {
                row.extend(cell(rep.per_modality.get(&m)));
            }
            row.extend(cell(Some(&rep.overall)));
            rows.push(row);
        }
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, &w))| if c < 2 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        }
    }
    out
}

/// FAA after every step, per run, mode and modality (plus `overall`).
pub fn faa_csv(runs: &[RunSummary]) -> String {
    let mut out = String::from("run,mode,series,t,faa\n");
    for r in runs {
        for (mode, rep) in &r.metrics.reports {
            for (t, a) in rep.faa_by_step.iter().enumerate() {
                let _ = writeln!(out, "{},{mode},overall,{},{a}", r.name, t + 1);
            }
            for (m, series) in &rep.modality_faa_by_step {
                for (t, a) in series.iter().enumerate() {
                    if let Some(a) = a {
                        let _ = writeln!(out, "{},{mode},{m},{},{a}", r.name, t + 1);
                    }
                }
            }
        }
    }
    out
}

pub fn cmd_report(dirs: &[PathBuf], out: &Path) -> anyhow::Result<Report> {
    let mut runs = Vec::new();
    let mut skipped = Vec::new();
    for d in dirs {
        match load_run(d)? {
            Some(r) => runs.push(r),
            None => skipped.push(d.clone()),
        }
    }
    if runs.is_empty() {
        return Err(UsageError("no completed run among the given directories".into()).into());
    }
    std::fs::create_dir_all(out)?;
    let plot_data = out.join(FAA_FILE);
    write_atomic(&plot_data, faa_csv(&runs).as_bytes())?;
    Ok(Report {
        table: render_table(&runs),
        plot_data,
        skipped,
    })
}

/// Overall FAA of a run under `mode`, if it was evaluated that way.
pub fn overall_faa(run: &RunSummary, mode: EvalMode) -> Option<f64> {
    run.metrics.reports.get(&mode).map(|r| r.overall.faa)
}
