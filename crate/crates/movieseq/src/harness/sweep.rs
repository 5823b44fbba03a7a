//! Ablation sweeps over data-construction axes: number of history clips, or
//! the plot/subtitle token budget. Each axis value is re-evaluated (or
//! retrained) and the metric table lands in a plot-ready CSV.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::manifest::{ManifestRecord, Split, Task};
use super::run::{run_eval, run_train, EvalOptions, TrainOptions};
use super::{HarnessError, RunConfig, Toggles};
use crate::instructions::HistoryMode;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SweepAxis {
    HistoryN(Vec<usize>),
    PlotTokens(Vec<usize>),
}

impl SweepAxis {
    /// Parse "history_n=0,2,4" or "plot_tokens=0,64,512".
    pub fn parse(s: &str) -> Result<Self, HarnessError> {
        let (name, values) = s
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("bad sweep axis {s:?}")))?;
        let values: Result<Vec<usize>, _> = values
            .split(',')
            .map(|v| v.trim().parse::<usize>())
            .collect();
        let values =
            values.map_err(|_| HarnessError::Config(format!("bad sweep values in {s:?}")))?;
        if values.is_empty() {
            return Err(HarnessError::Config("sweep needs at least one value".into()));
        }
        match name.trim() {
            "history_n" => Ok(Self::HistoryN(values)),
            "plot_tokens" => Ok(Self::PlotTokens(values)),
            other => Err(HarnessError::Config(format!("unknown sweep axis {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::HistoryN(_) => "history_n",
            Self::PlotTokens(_) => "plot_tokens",
        }
    }

    pub fn values(&self) -> &[usize] {
        match self {
            Self::HistoryN(v) | Self::PlotTokens(v) => v,
        }
    }
}

pub struct SweepOptions {
    pub task: Task,
    pub toggles: Toggles,
    pub mode: HistoryMode,
    pub split: Option<Split>,
    pub out_dir: PathBuf,
    /// Retrain per axis value instead of re-evaluating one checkpoint.
    pub retrain: bool,
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub axis_value: usize,
    pub metrics: BTreeMap<String, f64>,
}

/// Run the sweep and write `sweep.csv` with `axis_value,metric,value` rows.
pub fn run_ablation_sweep(
    config: &RunConfig,
    records: &[ManifestRecord],
    manifest_path: &Path,
    checkpoint: Option<&Path>,
    axis: &SweepAxis,
    opts: &SweepOptions,
) -> Result<Vec<SweepRow>, HarnessError> {
    std::fs::create_dir_all(&opts.out_dir)
        .map_err(|e| HarnessError::Io(opts.out_dir.display().to_string(), e.to_string()))?;
    let mut rows = Vec::new();
    for &value in axis.values() {
        let (history_limit, context_budget) = match axis {
            SweepAxis::HistoryN(_) => (Some(value), None),
            SweepAxis::PlotTokens(_) => (None, Some(value)),
        };
        let point_dir = opts.out_dir.join(format!("{}_{value:04}", axis.name()));
        let ckpt: PathBuf = if opts.retrain {
            let mut topts = TrainOptions::new(point_dir.join("train"));
            topts.toggles = opts.toggles;
            topts.history_limit = history_limit;
            topts.context_budget = context_budget;
            run_train(config, records, manifest_path, &topts)?
        } else {
            checkpoint
                .ok_or_else(|| {
                    HarnessError::Config("sweep needs --checkpoint or --retrain".into())
                })?
                .to_path_buf()
        };
        let mut eopts = EvalOptions::new(point_dir.join("eval"));
        eopts.toggles = opts.toggles;
        eopts.mode = opts.mode;
        eopts.split = opts.split;
        eopts.history_limit = history_limit;
        eopts.context_budget = context_budget;
        let outcome = run_eval(config, &ckpt, records, manifest_path, opts.task, &eopts)?;
        rows.push(SweepRow {
            axis_value: value,
            metrics: outcome.metrics,
        });
    }
    let csv_path = opts.out_dir.join("sweep.csv");
    let mut csv = String::from("axis_value,metric,value\n");
    for row in &rows {
        for (metric, value) in &row.metrics {
            csv.push_str(&format!("{},{metric},{value:.6}\n", row.axis_value));
        }
    }
    std::fs::write(&csv_path, csv)
        .map_err(|e| HarnessError::Io(csv_path.display().to_string(), e.to_string()))?;
    Ok(rows)
}
