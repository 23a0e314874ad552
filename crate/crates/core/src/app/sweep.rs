//! Ablation sweeps over the neighbor count or the layer count. Every value
//! is trained and tested on the same five seeded splits.

use std::io::Write;
use std::str::FromStr;

use serde::Serialize;

use super::config::RunConfig;
use super::train::{evaluate, train};
use crate::data::{split_dataset, Dataset};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::neighbors::NeighborQuery;

pub const SWEEP_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Neighbors,
    Layers,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Neighbors => "k",
            SweepParam::Layers => "layers",
        }
    }

    fn apply(self, cfg: &mut RunConfig, value: usize) {
        match self {
            SweepParam::Neighbors => cfg.encoder.neighbors = NeighborQuery::Knn(value),
            SweepParam::Layers => cfg.encoder.layers = value,
        }
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" => Ok(SweepParam::Neighbors),
            "layers" => Ok(SweepParam::Layers),
            other => Err(Error::Config(format!(
                "unknown sweep parameter `{other}` (use k or layers)"
            ))),
        }
    }
}

/// One CSV row. `split` is the split seed, or `mean` / `std` for the
/// aggregate rows.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub param: String,
    pub value: usize,
    pub split: String,
    pub best_epoch: Option<usize>,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn aggregate(param: &str, value: usize, reports: &[MetricsReport]) -> [SweepRow; 2] {
    let column =
        |f: &dyn Fn(&MetricsReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
    let optional = |f: &dyn Fn(&MetricsReport) -> Option<f64>| {
        let xs: Option<Vec<f64>> = reports.iter().map(f).collect();
        xs.map(|xs| mean_std(&xs))
    };
    let acc = column(&|r| r.accuracy);
    let p = column(&|r| r.macro_precision);
    let r = column(&|r| r.macro_recall);
    let f1 = column(&|r| r.macro_f1);
    let auroc = optional(&|r| r.auroc);
    let auprc = optional(&|r| r.auprc);
    let row = |label: &str, pick: fn((f64, f64)) -> f64| SweepRow {
        param: param.to_string(),
        value,
        split: label.to_string(),
        best_epoch: None,
        accuracy: pick(acc),
        macro_precision: pick(p),
        macro_recall: pick(r),
        macro_f1: pick(f1),
        auroc: auroc.map(pick),
        auprc: auprc.map(pick),
    };
    [row("mean", |m| m.0), row("std", |m| m.1)]
}

/// Trains and tests every value on each split seed. `progress` receives
/// every row as it is produced.
pub fn sweep(
    base: &RunConfig,
    data: &Dataset,
    param: SweepParam,
    values: &[usize],
    mut progress: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut rows = Vec::new();
    for &value in values {
        let mut cfg = base.clone();
        param.apply(&mut cfg, value);
        cfg.validate()?;
        let mut reports = Vec::new();
        for seed in SWEEP_SEEDS {
            let split = split_dataset(data, base.data.split(), seed)?;
            if split.test.is_empty() {
                return Err(Error::Config(format!(
                    "split seed {seed} leaves no test observations"
                )));
            }
            let outcome = train(&cfg, &split.train, &split.val, |_| {})?;
            let report = evaluate(&outcome.best, &split.test, cfg.training.execution)?;
            let row = SweepRow {
                param: param.name().into(),
                value,
                split: seed.to_string(),
                best_epoch: Some(outcome.best_epoch),
                accuracy: report.accuracy,
                macro_precision: report.macro_precision,
                macro_recall: report.macro_recall,
                macro_f1: report.macro_f1,
                auroc: report.auroc,
                auprc: report.auprc,
            };
            progress(&row);
            rows.push(row);
            reports.push(report);
        }
        for row in aggregate(param.name(), value, &reports) {
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(writer: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
