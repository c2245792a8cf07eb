//! `headscope` — train desk-scale transformers on synthetic tasks and run
//! the spectral / screen / ablate circuit-identification pipeline over the
//! checkpoints.
//!
//! Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 invariant
//! violation.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use headscope::error::Result;
use headscope::pipeline::{
    cmd_ablate, cmd_compositional, cmd_cross_ablate, cmd_report, cmd_screen, cmd_spectral,
    cmd_sweep, cmd_train, ExperimentConfig,
};
use headscope::screen::PatternClass;
use headscope::spectral::FeatureKey;

#[derive(Parser)]
#[command(name = "headscope", version, about)]
struct Cli {
    /// Worker threads for analysis passes (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model per the config and freeze eval batches + checkpoints.
    Train {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        /// Override the model seed from the config.
        #[arg(long)]
        model_seed: Option<u64>,
        /// Override the data seed from the config.
        #[arg(long)]
        data_seed: Option<u64>,
    },
    /// PR trajectories, trajectory features, ranking, elbow, spectral circuit.
    Spectral {
        #[arg(long)]
        run_dir: PathBuf,
        /// Ranking feature: integral | spread | max_pr | mean_post_grok | max_rate.
        #[arg(long, default_value = "integral")]
        feature: String,
        /// Eval batch name (defaults to the task's primary batch).
        #[arg(long)]
        batch: Option<String>,
    },
    /// Selectivity screen, classification, circuit manifests, null calibration.
    Screen {
        #[arg(long)]
        run_dir: PathBuf,
        /// Checkpoint step (defaults to the last).
        #[arg(long)]
        step: Option<u64>,
        /// Circuit classes to extract (repeatable): induction, prev_token,
        /// duplicate_token, first_token, self, local, key_retrieval.
        #[arg(long = "class")]
        classes: Vec<String>,
        #[arg(long)]
        batch: Option<String>,
        /// Override the per-class membership threshold.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Baseline / circuit / matched-random / upper-bound condition suite.
    Ablate {
        #[arg(long)]
        run_dir: PathBuf,
        /// Circuit manifest JSON produced by `screen` or `spectral`.
        #[arg(long)]
        circuit: PathBuf,
        #[arg(long)]
        batch: Option<String>,
        #[arg(long)]
        step: Option<u64>,
        /// Also compute LM loss on the held-out filler stream.
        #[arg(long)]
        val_loss: bool,
        /// Override matched-random control seeds (repeatable).
        #[arg(long = "control-seed")]
        control_seeds: Vec<u64>,
    },
    /// Ablation-floor sweep over screen thresholds.
    Sweep {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        class: String,
        /// Thresholds (defaults to 2,10,30,50,100).
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        #[arg(long)]
        batch: Option<String>,
        #[arg(long)]
        step: Option<u64>,
    },
    /// Ablate a circuit identified on another run against this run's model.
    CrossAblate {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        circuit: PathBuf,
        #[arg(long)]
        batch: Option<String>,
        #[arg(long)]
        step: Option<u64>,
    },
    /// Prev-token circuit ablation measured on the induction batch.
    Compositional {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        prev_circuit: PathBuf,
        #[arg(long)]
        induction_circuit: Option<PathBuf>,
        #[arg(long)]
        batch: Option<String>,
        #[arg(long)]
        step: Option<u64>,
    },
    /// Consolidated report + precision-at-k + plot data.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

fn parse_classes(names: &[String]) -> Result<Vec<PatternClass>> {
    names.iter().map(|s| PatternClass::parse(s)).collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            run_dir,
            model_seed,
            data_seed,
        } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(s) = model_seed {
                cfg.model.seed = s;
            }
            if let Some(s) = data_seed {
                cfg.train.data_seed = s;
            }
            let outcome = cmd_train(&cfg, &run_dir)?;
            println!(
                "trained {} steps, {} checkpoints, final loss {:.4}, eval top1 {:.4} -> {}",
                outcome.steps,
                outcome.checkpoints,
                outcome.final_loss,
                outcome.final_eval_top1,
                run_dir.display()
            );
        }
        Command::Spectral {
            run_dir,
            feature,
            batch,
        } => {
            let key: FeatureKey = feature.parse()?;
            let summary = cmd_spectral(&run_dir, key, batch.as_deref())?;
            println!(
                "spectral[{}] on {}: elbow k={} ({:.1}% of {} heads{}), circuit k={}",
                summary.feature,
                summary.batch,
                summary.elbow_k,
                100.0 * summary.elbow_fraction,
                summary.n_heads,
                if summary.elbow_weak { ", weak" } else { "" },
                summary.spectral_circuit_k
            );
        }
        Command::Screen {
            run_dir,
            step,
            classes,
            batch,
            threshold,
        } => {
            let classes = parse_classes(&classes)?;
            let summary = cmd_screen(&run_dir, step, &classes, batch.as_deref(), threshold)?;
            println!(
                "screen step {} on {}: {}/{} heads classified, {:.1}% above null p99",
                summary.step,
                summary.batch,
                summary.classified_heads,
                summary.total_heads,
                100.0 * summary.fraction_above_null_p99
            );
            for (name, size) in &summary.circuits {
                println!("circuit {name}: {size} heads");
            }
        }
        Command::Ablate {
            run_dir,
            circuit,
            batch,
            step,
            val_loss,
            control_seeds,
        } => {
            let seeds = (!control_seeds.is_empty()).then_some(control_seeds.as_slice());
            let report = cmd_ablate(&run_dir, &circuit, batch.as_deref(), step, val_loss, seeds)?;
            for row in &report.rows {
                println!(
                    "{:<24} top1 {:.4} top5 {:.4} logit {:+.4}{}",
                    row.condition,
                    row.top1,
                    row.top5,
                    row.mean_target_logit,
                    row.top1_delta
                        .map(|d| format!(" (d_top1 {d:+.4})"))
                        .unwrap_or_default()
                );
            }
            if report.multi_seed_recommended {
                println!("note: matched-random effect is large; multi-seed sampling recommended");
            }
        }
        Command::Sweep {
            run_dir,
            class,
            thresholds,
            batch,
            step,
        } => {
            let class = PatternClass::parse(&class)?;
            let sweep = cmd_sweep(
                &run_dir,
                class,
                thresholds.as_deref(),
                batch.as_deref(),
                step,
            )?;
            println!(
                "sweep {} baseline top1 {:.4} monotone {}",
                class.name(),
                sweep.baseline_top1,
                sweep.monotone
            );
            for row in &sweep.rows {
                println!(
                    "T={:<6} n={:<3} top1 {:.4} retention {:.4} {}",
                    row.threshold,
                    row.circuit_size,
                    row.top1,
                    row.retention,
                    row.flags.join(" ")
                );
            }
        }
        Command::CrossAblate {
            run_dir,
            circuit,
            batch,
            step,
        } => {
            let rows = cmd_cross_ablate(&run_dir, &circuit, batch.as_deref(), step)?;
            for row in &rows {
                println!(
                    "{:<32} top1 {:.4}{}",
                    row.condition,
                    row.top1,
                    row.top1_delta
                        .map(|d| format!(" (d {d:+.4})"))
                        .unwrap_or_default()
                );
            }
        }
        Command::Compositional {
            run_dir,
            prev_circuit,
            induction_circuit,
            batch,
            step,
        } => {
            let result = cmd_compositional(
                &run_dir,
                &prev_circuit,
                induction_circuit.as_deref(),
                batch.as_deref(),
                step,
            )?;
            if result.skipped {
                println!("compositional: prev circuit empty, suite skipped");
            } else {
                for row in &result.rows {
                    println!(
                        "{:<24} top1 {:.4}{}",
                        row.condition,
                        row.top1,
                        row.top1_delta
                            .map(|d| format!(" (d {d:+.4})"))
                            .unwrap_or_default()
                    );
                }
                println!(
                    "overlap with induction circuit: {}",
                    if result.overlap.is_empty() {
                        "none".to_string()
                    } else {
                        result
                            .overlap
                            .iter()
                            .map(|h| h.to_string())
                            .collect::<Vec<_>>()
                            .join(" ")
                    }
                );
            }
        }
        Command::Report { run_dir } => {
            let text = cmd_report(&run_dir)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap defaults to exit code 2; usage errors here are 1
            let _ = e.print();
            let code = if e.use_stderr() { 1 } else { 0 };
            std::process::exit(code);
        }
    };
    if let Some(n) = cli.threads {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_err()
        {
            eprintln!("warning: thread pool already initialized; --threads ignored");
        }
    }
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
