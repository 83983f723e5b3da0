//! Human-readable run reports: per-class tables, training curves, and a
//! log-confusion heatmap.
//!
//! A report reads a run directory produced by `train` (training_log.csv) and
//! optionally an `eval/` subdirectory produced by `evaluate` (metrics.csv,
//! confusion_log.csv), and renders everything under `<run>/report/`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::plot::{self, Series};

/// Files written by [`emit_report`].
#[derive(Debug)]
pub struct ReportSummary {
    pub files: Vec<PathBuf>,
}

fn read_csv(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Eval(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Eval(format!("{}: {e}", path.display())))?;
        rows.push(record.iter().map(str::to_string).collect());
    }
    Ok(rows)
}

fn column(rows: &[Vec<String>], idx: usize) -> Vec<f64> {
    rows.iter()
        .skip(1)
        .filter_map(|r| r.get(idx).and_then(|v| v.parse().ok()))
        .collect()
}

/// Render tables and plots for a completed run directory.
pub fn emit_report(run_dir: &Path) -> Result<ReportSummary> {
    let report_dir = run_dir.join("report");
    fs::create_dir_all(&report_dir).map_err(|e| Error::io(&report_dir, e))?;
    let mut files = Vec::new();

    // training curves from the per-epoch log
    let log_path = run_dir.join("training_log.csv");
    let mut table = String::new();
    if log_path.is_file() {
        let rows = read_csv(&log_path)?;
        let epochs = column(&rows, 0);
        if epochs.is_empty() {
            table.push_str("training history: empty (0 epochs)\n\n");
        } else {
            let curves = [
                (2usize, "loss", "curve_loss.png"),
                (5, "pixel accuracy", "curve_accuracy.png"),
                (6, "miou", "curve_miou.png"),
            ];
            for (col, name, file) in curves {
                let values = column(&rows, col);
                let series = vec![Series {
                    name: name.to_uppercase(),
                    points: epochs.iter().copied().zip(values).collect(),
                    color: plot::PALETTE[col % plot::PALETTE.len()],
                }];
                let path = report_dir.join(file);
                plot::line_chart(&path, &name.to_uppercase(), "EPOCH", name, &series)?;
                files.push(path);
            }
            table.push_str(&format!("training history: {} epochs\n\n", epochs.len()));
        }
    } else {
        table.push_str("training history: no training_log.csv found\n\n");
    }

    // per-class metrics table in the 4-defect-row + Average layout
    let metrics_path = run_dir.join("eval").join("metrics.csv");
    if metrics_path.is_file() {
        let rows = read_csv(&metrics_path)?;
        table.push_str(&format!(
            "{:<16}{:>10}{:>12}{:>10}{:>10}\n",
            "Defect Class", "mIoU", "Precision", "Recall", "F1-Score"
        ));
        for row in rows.iter().skip(1) {
            if row.len() < 5 {
                continue;
            }
            let pct = |s: &String| {
                s.parse::<f64>()
                    .map(|v| format!("{:.2}", v * 100.0))
                    .unwrap_or_else(|_| s.clone())
            };
            let name = if row[0] == "average" { "Average" } else { &row[0] };
            table.push_str(&format!(
                "{:<16}{:>10}{:>12}{:>10}{:>10}\n",
                name,
                pct(&row[1]),
                pct(&row[2]),
                pct(&row[3]),
                pct(&row[4])
            ));
        }
    } else {
        table.push_str("per-class metrics: no eval/metrics.csv found (run `evaluate` first)\n");
    }
    let table_path = report_dir.join("report.txt");
    fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
    files.push(table_path);

    // log-confusion heatmap
    let log_cm_path = run_dir.join("eval").join("confusion_log.csv");
    if log_cm_path.is_file() {
        let rows = read_csv(&log_cm_path)?;
        let n = rows.len();
        if n > 0 && rows.iter().all(|r| r.len() == n) {
            let mut m = Array2::<f64>::zeros((n, n));
            for (r, row) in rows.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    m[(r, c)] = v.parse().unwrap_or(0.0);
                }
            }
            let labels: Vec<String> = (0..n)
                .map(|i| if i == 0 { "BG".to_string() } else { format!("D{i}") })
                .collect();
            let path = report_dir.join("confusion_log_heatmap.png");
            plot::heatmap(&path, &m.view(), &labels, "LOG CONFUSION")?;
            files.push(path);
        }
    }

    // machine-readable copy of the table contents
    let csv_path = report_dir.join("table.csv");
    let mut csv_text = String::from("section,content\n");
    for line in table.lines() {
        csv_text.push_str(&format!("report,\"{}\"\n", line.replace('"', "'")));
    }
    fs::write(&csv_path, csv_text).map_err(|e| Error::io(&csv_path, e))?;
    files.push(csv_path);

    Ok(ReportSummary { files })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_on_empty_run_notes_missing_pieces() {
        let dir = tempfile::tempdir().unwrap();
        let summary = emit_report(dir.path()).unwrap();
        assert!(!summary.files.is_empty());
        let text = fs::read_to_string(dir.path().join("report/report.txt")).unwrap();
        assert!(text.contains("no training_log.csv"));
    }

    #[test]
    fn report_with_zero_epoch_log_mentions_empty_history() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("training_log.csv"),
            "epoch,step,loss_total,loss_sup,loss_cons,pixel_acc,miou\n",
        )
        .unwrap();
        emit_report(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("report/report.txt")).unwrap();
        assert!(text.contains("empty (0 epochs)"), "{text}");
    }

    #[test]
    fn full_run_dir_produces_at_least_four_files() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("training_log.csv"),
            "epoch,step,loss_total,loss_sup,loss_cons,pixel_acc,miou\n\
             1,3,1.5,1.0,0.33,0.5,0.1\n2,6,1.2,0.8,0.26,0.6,0.2\n",
        )
        .unwrap();
        let eval_dir = dir.path().join("eval");
        fs::create_dir_all(&eval_dir).unwrap();
        fs::write(
            eval_dir.join("metrics.csv"),
            "class,iou,precision,recall,f1\ndefect1,0.5,0.6,0.7,0.65\naverage,0.5,0.6,0.7,0.65\n",
        )
        .unwrap();
        fs::write(
            eval_dir.join("confusion_log.csv"),
            "1.0,0.5\n0.25,2.0\n",
        )
        .unwrap();
        let summary = emit_report(dir.path()).unwrap();
        assert!(summary.files.len() >= 4, "{:?}", summary.files);
        for f in &summary.files {
            assert!(f.exists());
        }
    }

    #[test]
    fn identical_inputs_give_byte_identical_reports() {
        let make = || {
            let dir = tempfile::tempdir().unwrap();
            fs::write(
                dir.path().join("training_log.csv"),
                "epoch,step,loss_total,loss_sup,loss_cons,pixel_acc,miou\n1,3,1.5,1.0,0.33,0.5,0.1\n",
            )
            .unwrap();
            emit_report(dir.path()).unwrap();
            let table = fs::read(dir.path().join("report/table.csv")).unwrap();
            let txt = fs::read(dir.path().join("report/report.txt")).unwrap();
            (table, txt)
        };
        assert_eq!(make(), make());
    }
}
