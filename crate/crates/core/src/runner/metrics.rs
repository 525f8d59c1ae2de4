//! Accuracy matrices and the incremental metrics derived from them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::Modality;

/// One evaluated column: the classes one modality contributed to one task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unit {
    /// 1-based step of the task.
    pub task: usize,
    pub modality: Modality,
}

/// `rows[t - 1][u]` is the accuracy on unit `u` after step `t`; row `t` covers
/// exactly the units of tasks `1..=t`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub units: Vec<Unit>,
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn steps(&self) -> usize {
        self.rows.len()
    }

    /// Number of units introduced up to and including step `t`.
    pub fn width(&self, t: usize) -> usize {
        self.units.iter().filter(|u| u.task <= t).count()
    }

    pub fn get(&self, t: usize, unit: usize) -> Option<f64> {
        self.rows.get(t.checked_sub(1)?).and_then(|r| r.get(unit)).copied()
    }

    /// Append the row for the next step.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let t = self.rows.len() + 1;
        if row.len() != self.width(t) {
            return Err(Error::usage(format!(
                "row {t} has {} entries, expected {}",
                row.len(),
                self.width(t)
            )));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::usage("accuracy outside [0, 1]"));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Build from plain lower-triangular rows, one single-modality unit per task.
    pub fn from_rows(modalities: &[Modality], rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = AccuracyMatrix {
            units: modalities
                .iter()
                .enumerate()
                .map(|(i, &modality)| Unit { task: i + 1, modality })
                .collect(),
            rows: Vec::new(),
        };
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn is_complete(&self) -> bool {
        let last = self.units.iter().map(|u| u.task).max().unwrap_or(0);
        self.rows.len() == last && last > 0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub aia: f64,
    pub faa: f64,
    pub forgetting: f64,
    /// False when no unit precedes the final step; `forgetting` is then 0.
    pub forgetting_defined: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_modality: BTreeMap<Modality, Metrics>,
    /// Unweighted mean over the modalities present.
    pub overall: Metrics,
    /// The formulas applied to every unit at once.
    pub pooled: Metrics,
    /// Overall FAA after every step, for time plots.
    pub faa_by_step: Vec<f64>,
    /// Per-modality mean accuracy after every step (absent before a
    /// modality's first task).
    pub modality_faa_by_step: BTreeMap<Modality, Vec<Option<f64>>>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Metrics over the units accepted by `keep`, counting steps from the first
/// step that introduced such a unit.
fn metrics_over(m: &AccuracyMatrix, keep: impl Fn(&Unit) -> bool) -> Option<(Metrics, Vec<Option<f64>>)> {
    let cols: Vec<usize> = (0..m.units.len()).filter(|&u| keep(&m.units[u])).collect();
    let first = cols.iter().map(|&u| m.units[u].task).min()?;
    let last = m.steps();
    let by_step: Vec<Option<f64>> = (1..=last)
        .map(|t| mean(cols.iter().filter(|&&u| m.units[u].task <= t).map(|&u| m.rows[t - 1][u])))
        .collect();
    let window: Vec<f64> = by_step[first - 1..].iter().map(|a| a.expect("unit present")).collect();
    let aia = mean(window.iter().copied())?;
    let faa = *window.last()?;
    let forgotten: Vec<f64> = cols
        .iter()
        .filter(|&&u| m.units[u].task < last)
        .map(|&u| {
            let j = m.units[u].task;
            let peak = (j..last).map(|l| m.rows[l - 1][u]).fold(f64::NEG_INFINITY, f64::max);
            peak - m.rows[last - 1][u]
        })
        .collect();
    let forgetting = mean(forgotten.iter().copied());
    Some((
        Metrics {
            aia,
            faa,
            forgetting: forgetting.unwrap_or(0.0),
            forgetting_defined: forgetting.is_some(),
        },
        by_step,
    ))
}

pub fn compute_metrics(m: &AccuracyMatrix) -> Result<MetricsReport> {
    if !m.is_complete() {
        return Err(Error::usage("metrics need a complete accuracy matrix"));
    }
    let (pooled, faa_by_step) = metrics_over(m, |_| true).expect("complete matrix has units");
    let mut per_modality = BTreeMap::new();
    let mut modality_faa_by_step = BTreeMap::new();
    for md in Modality::ALL {
        if let Some((x, by_step)) = metrics_over(m, |u| u.modality == md) {
            per_modality.insert(md, x);
            modality_faa_by_step.insert(md, by_step);
        }
    }
    let avg = |f: fn(&Metrics) -> f64| mean(per_modality.values().map(f)).unwrap_or(0.0);
    let defined: Vec<&Metrics> = per_modality.values().filter(|x| x.forgetting_defined).collect();
    let overall = Metrics {
        aia: avg(|x| x.aia),
        faa: avg(|x| x.faa),
        forgetting: mean(defined.iter().map(|x| x.forgetting)).unwrap_or(0.0),
        forgetting_defined: !defined.is_empty(),
    };
    Ok(MetricsReport {
        per_modality,
        overall,
        pooled,
        faa_by_step: faa_by_step.into_iter().map(|x| x.expect("every row has units")).collect(),
        modality_faa_by_step,
    })
}
