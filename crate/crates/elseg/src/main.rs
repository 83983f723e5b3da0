//! Command-line front end: synthetic data generation, training, evaluation,
//! ablation sweeps, and report rendering.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use elseg::config::{Config, ExperimentConfig};
use elseg::data::{generate_synthetic_corpus, SynthConfig};
use elseg::report::emit_report;
use elseg::sweep::{run_ablation, SweepAxis, SweepSpec};
use elseg::{trainer, Result};

#[derive(Parser)]
#[command(name = "elseg", about = "Semi-supervised EL defect segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic EL-like corpus with exact masks.
    SynthData {
        /// Number of image/mask pairs.
        #[arg(long)]
        count: usize,
        /// Square image side length (>= 32).
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Number of defect classes (1..=4).
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output directory (images/, masks/, manifest.tsv).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a student/teacher pair from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Resume from a checkpoint written at an epoch boundary.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the config's evaluation manifest.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Evaluate the teacher weights instead of the student's.
        #[arg(long = "eval-network")]
        eval_network: Option<String>,
        /// Add background rows to metrics.csv (diagnostic).
        #[arg(long = "include-background")]
        include_background: bool,
    },
    /// Sweep one hyperparameter axis: a full train+evaluate per (value, seed).
    Ablate {
        /// thresholds | label_fraction | consistency_kind
        #[arg(long)]
        axis: String,
        /// Base config applied to every child run.
        #[arg(long)]
        config: PathBuf,
        /// Grid values; defaults to the standard grid for the axis.
        #[arg(long, value_delimiter = ';')]
        values: Option<Vec<String>>,
        /// Seeds, comma-separated.
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
        /// Sweep output directory; defaults to `<out.dir>/ablate_<axis>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render tables and plots for a completed run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData {
            count,
            size,
            classes,
            seed,
            out,
        } => {
            let manifest = generate_synthetic_corpus(
                &SynthConfig {
                    count,
                    height: size,
                    width: size,
                    num_classes: classes,
                    seed,
                },
                &out,
            )?;
            println!(
                "wrote {} image/mask pairs under {}",
                manifest.num_labeled(),
                out.display()
            );
        }
        Command::Train { config, resume } => {
            let exp = ExperimentConfig::from_config(&Config::load(&config)?)?;
            let outcome = trainer::train(&exp, resume.as_deref())?;
            if let Some(last) = outcome.state.history.last() {
                println!(
                    "trained {} epochs ({} steps): loss {:.4}, pixel acc {:.4}, miou {:.4}",
                    last.epoch, last.step, last.loss_total, last.pixel_acc, last.miou
                );
            } else {
                println!("trained 0 epochs (nothing to do)");
            }
            println!("final checkpoint: {}", outcome.final_checkpoint.display());
        }
        Command::Evaluate {
            config,
            ckpt,
            out,
            eval_network,
            include_background,
        } => {
            let mut exp = ExperimentConfig::from_config(&Config::load(&config)?)?;
            if let Some(network) = eval_network {
                exp.trainer.eval_network = match network.as_str() {
                    "student" => trainer::EvalNetwork::Student,
                    "teacher" => trainer::EvalNetwork::Teacher,
                    other => {
                        return Err(elseg::Error::InvalidArgument(format!(
                            "--eval-network must be student|teacher, got `{other}`"
                        )))
                    }
                };
            }
            if include_background {
                exp.trainer.include_background = true;
            }
            let report = trainer::evaluate(&exp, &ckpt, &out)?;
            println!(
                "miou {:.4}, precision {:.4}, recall {:.4}, f1 {:.4} -> {}",
                report.macro_iou,
                report.macro_precision,
                report.macro_recall,
                report.macro_f1,
                out.display()
            );
        }
        Command::Ablate {
            axis,
            config,
            values,
            seeds,
            out,
        } => {
            let axis = SweepAxis::parse(&axis)?;
            let mut spec = SweepSpec::new(axis, config.clone());
            if let Some(values) = values {
                spec.values = values;
            }
            spec.seeds = seeds;
            let out = match out {
                Some(out) => out,
                None => {
                    let exp = ExperimentConfig::from_config(&Config::load(&config)?)?;
                    exp.out_dir.join(format!(
                        "ablate_{}",
                        match axis {
                            SweepAxis::Thresholds => "thresholds",
                            SweepAxis::LabelFraction => "label_fraction",
                            SweepAxis::ConsistencyKind => "consistency_kind",
                        }
                    ))
                }
            };
            let summary = run_ablation(&spec, &out)?;
            println!("sweep summary: {}", summary.summary_csv.display());
            for cell in &summary.cells {
                match cell.miou {
                    Some((mean, std)) => println!(
                        "  {}: miou {:.4} +/- {:.4} ({} ok, {} failed)",
                        cell.value, mean, std, cell.runs_ok, cell.runs_failed
                    ),
                    None => println!("  {}: all runs failed", cell.value),
                }
            }
        }
        Command::Report { run } => {
            let summary = emit_report(&run)?;
            for file in &summary.files {
                println!("wrote {}", file.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
