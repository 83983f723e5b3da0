//! Ablation sweeps: one full train+evaluate per (axis value, seed), with a
//! mean +/- std summary per cell.
//!
//! Child runs own their directories (`<out>/<value>/seed_<s>/`); the summary
//! is rebuilt purely from the children's `eval/metrics.csv` files, so it can
//! be regenerated after the fact without re-running anything. A failed child
//! is recorded and the sweep continues.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{Config, ExperimentConfig};
use crate::error::{Error, Result};
use crate::plot::{self, Series};
use crate::trainer;

/// Which hyperparameter the sweep walks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// `(t_pos, t_neg)` pairs.
    Thresholds,
    /// Labeled fraction of the training pairs.
    LabelFraction,
    /// Consistency loss kind (`semice` or `mse`).
    ConsistencyKind,
}

impl SweepAxis {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "thresholds" => Ok(SweepAxis::Thresholds),
            "label_fraction" => Ok(SweepAxis::LabelFraction),
            "consistency_kind" => Ok(SweepAxis::ConsistencyKind),
            other => Err(Error::InvalidArgument(format!(
                "unknown ablation axis `{other}` (thresholds|label_fraction|consistency_kind)"
            ))),
        }
    }

    /// The standard grid walked when no explicit values are given.
    pub fn default_values(&self) -> Vec<String> {
        match self {
            SweepAxis::Thresholds => ["0.0,0.0", "0.2,0.4", "0.3,0.2", "0.4,0.2", "0.5,0.5", "0.6,0.0"]
                .map(String::from)
                .to_vec(),
            SweepAxis::LabelFraction => ["0.05", "0.10", "0.15", "0.20"].map(String::from).to_vec(),
            SweepAxis::ConsistencyKind => ["semice", "mse"].map(String::from).to_vec(),
        }
    }
}

/// A sweep description: axis, grid values, base config, seeds.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<String>,
    pub base_config: PathBuf,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    pub fn new(axis: SweepAxis, base_config: PathBuf) -> Self {
        SweepSpec {
            values: axis.default_values(),
            axis,
            base_config,
            seeds: vec![1, 2, 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::InvalidArgument("sweep has no values".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("sweep has no seeds".into()));
        }
        Ok(())
    }
}

/// Mean +/- std of the four key metrics for one grid value.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub value: String,
    pub runs_ok: usize,
    pub runs_failed: usize,
    /// `(mean, std)` for miou, precision, recall, f1; None when no run
    /// finished.
    pub miou: Option<(f64, f64)>,
    pub precision: Option<(f64, f64)>,
    pub recall: Option<(f64, f64)>,
    pub f1: Option<(f64, f64)>,
}

#[derive(Debug)]
pub struct SweepSummary {
    pub cells: Vec<SweepCell>,
    pub summary_csv: PathBuf,
}

fn sanitize(value: &str) -> String {
    value
        .chars()
        .map(|c| match c {
            '.' => 'p',
            ',' => '_',
            c if c.is_ascii_alphanumeric() => c,
            _ => '-',
        })
        .collect()
}

fn apply_axis(cfg: &mut Config, axis: SweepAxis, value: &str) -> Result<()> {
    match axis {
        SweepAxis::Thresholds => {
            let parts: Vec<&str> = value.split(',').map(str::trim).collect();
            if parts.len() != 2 {
                return Err(Error::InvalidArgument(format!(
                    "threshold value must be `t_pos,t_neg`, got `{value}`"
                )));
            }
            cfg.set("loss.t_pos", parts[0]);
            cfg.set("loss.t_neg", parts[1]);
        }
        SweepAxis::LabelFraction => {
            cfg.set("data.labeled_fraction", value);
        }
        SweepAxis::ConsistencyKind => {
            cfg.set("loss.consistency", value);
        }
    }
    Ok(())
}

/// Run every (value, seed) cell of the sweep and aggregate the results.
pub fn run_ablation(spec: &SweepSpec, out_dir: &Path) -> Result<SweepSummary> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let base = Config::load(&spec.base_config)?;

    for value in &spec.values {
        for &seed in &spec.seeds {
            let run_dir = out_dir.join(sanitize(value)).join(format!("seed_{seed}"));
            if let Err(e) = run_child(&base, spec.axis, value, seed, &run_dir) {
                // record and continue; the aggregation step marks the cell
                let marker = run_dir.join("FAILED");
                let _ = fs::create_dir_all(&run_dir);
                let _ = fs::write(&marker, e.to_string());
                eprintln!("ablation cell value={value} seed={seed} failed: {e}");
            }
        }
    }

    let summary = aggregate(spec, out_dir)?;
    if spec.axis == SweepAxis::LabelFraction {
        emit_fraction_plots(&summary, out_dir)?;
    }
    Ok(summary)
}

fn run_child(
    base: &Config,
    axis: SweepAxis,
    value: &str,
    seed: u64,
    run_dir: &Path,
) -> Result<()> {
    let mut cfg = base.clone();
    apply_axis(&mut cfg, axis, value)?;
    cfg.set("train.seed", seed);
    cfg.set("data.split_seed", seed);
    cfg.set("out.dir", run_dir.display());
    let exp = ExperimentConfig::from_config(&cfg)?;
    let outcome = trainer::train(&exp, None)?;
    trainer::evaluate(&exp, &outcome.final_checkpoint, &run_dir.join("eval"))?;
    Ok(())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, std)
}

/// Rebuild the sweep summary purely from the child runs' metrics CSVs.
pub fn aggregate(spec: &SweepSpec, out_dir: &Path) -> Result<SweepSummary> {
    let mut cells = Vec::new();
    for value in &spec.values {
        let mut metrics: [Vec<f64>; 4] = Default::default();
        let mut ok = 0usize;
        let mut failed = 0usize;
        for &seed in &spec.seeds {
            let run_dir = out_dir.join(sanitize(value)).join(format!("seed_{seed}"));
            match read_average_row(&run_dir.join("eval").join("metrics.csv")) {
                Ok(row) => {
                    for (store, v) in metrics.iter_mut().zip(row) {
                        store.push(v);
                    }
                    ok += 1;
                }
                Err(_) => failed += 1,
            }
        }
        let stat = |vals: &Vec<f64>| {
            if vals.is_empty() {
                None
            } else {
                Some(mean_std(vals))
            }
        };
        cells.push(SweepCell {
            value: value.clone(),
            runs_ok: ok,
            runs_failed: failed,
            miou: stat(&metrics[0]),
            precision: stat(&metrics[1]),
            recall: stat(&metrics[2]),
            f1: stat(&metrics[3]),
        });
    }

    let summary_csv = out_dir.join("summary.csv");
    let mut writer = csv::Writer::from_path(&summary_csv).map_err(|e| Error::Eval(e.to_string()))?;
    writer
        .write_record([
            "value", "runs_ok", "runs_failed", "miou_mean", "miou_std", "precision_mean",
            "precision_std", "recall_mean", "recall_std", "f1_mean", "f1_std",
        ])
        .map_err(|e| Error::Eval(e.to_string()))?;
    let fmt = |m: &Option<(f64, f64)>, i: usize| {
        m.map(|v| format!("{:.6}", if i == 0 { v.0 } else { v.1 }))
            .unwrap_or_else(|| "failed".to_string())
    };
    for cell in &cells {
        writer
            .write_record([
                cell.value.clone(),
                cell.runs_ok.to_string(),
                cell.runs_failed.to_string(),
                fmt(&cell.miou, 0),
                fmt(&cell.miou, 1),
                fmt(&cell.precision, 0),
                fmt(&cell.precision, 1),
                fmt(&cell.recall, 0),
                fmt(&cell.recall, 1),
                fmt(&cell.f1, 0),
                fmt(&cell.f1, 1),
            ])
            .map_err(|e| Error::Eval(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(&summary_csv, e))?;
    Ok(SweepSummary { cells, summary_csv })
}

/// Pull (miou, precision, recall, f1) from a metrics.csv `average` row.
fn read_average_row(path: &Path) -> Result<[f64; 4]> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Eval(format!("{e}")))?;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Eval(format!("{e}")))?;
        if record.get(0) == Some("average") {
            let parse = |i: usize| -> Result<f64> {
                record
                    .get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Eval(format!("bad metrics row in {}", path.display())))
            };
            return Ok([parse(1)?, parse(2)?, parse(3)?, parse(4)?]);
        }
    }
    Err(Error::Eval(format!("{}: no average row", path.display())))
}

fn emit_fraction_plots(summary: &SweepSummary, out_dir: &Path) -> Result<()> {
    let metric_of = |cell: &SweepCell, i: usize| match i {
        0 => cell.miou,
        1 => cell.precision,
        2 => cell.recall,
        _ => cell.f1,
    };
    for (i, name) in ["miou", "precision", "recall", "f1"].iter().enumerate() {
        let points: Vec<(f64, f64)> = summary
            .cells
            .iter()
            .filter_map(|c| {
                let x: f64 = c.value.parse().ok()?;
                metric_of(c, i).map(|(mean, _)| (x, mean))
            })
            .collect();
        let series = vec![Series {
            name: name.to_uppercase(),
            points,
            color: plot::PALETTE[i % plot::PALETTE.len()],
        }];
        plot::line_chart(
            &out_dir.join(format!("fraction_{name}.png")),
            &format!("{} VS LABELED FRACTION", name.to_uppercase()),
            "FRACTION",
            name,
            &series,
        )?;
    }
    Ok(())
}
