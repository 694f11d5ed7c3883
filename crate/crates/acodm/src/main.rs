//! Experiment CLI: corpus generation, training runs, and run comparison.

use acodm::corpus::{export_corpus, generate, import_corpus};
use acodm::orchestrator::report::compare_report;
use acodm::orchestrator::{run_transfer, run_with_config, Mode, RunConfig};
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::sync::Arc;

#[derive(Parser)]
#[command(
    name = "acodm",
    about = "Actor-critic online data mixing experiments at desk scale",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-domain corpus described by a config and
    /// write it as a flat binary file.
    GenerateCorpus {
        /// Run config (JSON); only the corpus section is used.
        #[arg(long)]
        config: PathBuf,
        /// Output path for the corpus binary.
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute one training run and write metrics, overhead accounting, and
    /// (for agent modes) the final actor checkpoint.
    Run {
        /// Run config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Override the config's policy mode: ac-odm, transfer, exp3, static.
        #[arg(long)]
        mode: Option<String>,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Load the corpus from a binary file instead of regenerating it.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Transfer mode only: reuse an actor checkpoint, skipping stage one.
        #[arg(long)]
        actor: Option<PathBuf>,
    },
    /// Compare finished runs: steps to the shared threshold and speedups.
    Report {
        /// Metrics CSV files to compare (at least two).
        files: Vec<PathBuf>,
        /// Explicit loss threshold; defaults to the static run's final loss.
        #[arg(long)]
        threshold: Option<f64>,
        /// Also write the comparison as CSV to this path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the desk-scale default run config as JSON.
    DefaultConfig,
}

fn main() {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(err.exit_code());
        }
    }
}

fn execute(cli: Cli) -> acodm::Result<()> {
    match cli.command {
        Command::GenerateCorpus { config, out } => {
            let cfg = RunConfig::from_json_file(&config)?;
            let corpus = generate(&cfg.corpus)?;
            export_corpus(&corpus, &out)?;
            println!(
                "wrote corpus {} (k={}, vocab={}, seq_len={}, hash={})",
                out.display(),
                corpus.k,
                corpus.vocab_size,
                corpus.seq_len,
                corpus.content_hash()
            );
            Ok(())
        }
        Command::Run {
            config,
            mode,
            seed,
            output_dir,
            corpus,
            actor,
        } => {
            let mut cfg = RunConfig::from_json_file(&config)?;
            if let Some(mode) = mode {
                cfg.mode = Mode::parse(&mode)?;
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(dir) = output_dir {
                cfg.output_dir = dir;
            }
            cfg.validate()?;
            let corpus = match corpus {
                Some(path) => Some(Arc::new(import_corpus(&path)?)),
                None => None,
            };

            let outputs = match (&cfg.mode, &actor) {
                (Mode::Transfer, Some(ckpt)) => {
                    let corpus = match corpus {
                        Some(c) => c,
                        None => Arc::new(generate(&cfg.corpus)?),
                    };
                    std::fs::create_dir_all(&cfg.output_dir)?;
                    run_transfer(&cfg, corpus, Some(ckpt))?
                }
                _ => run_with_config(&cfg, corpus)?,
            };

            let primary = &outputs.primary;
            if let Some(proxy) = &outputs.proxy {
                println!(
                    "proxy stage:  metrics {}  final mean val loss {:.6}",
                    proxy.metrics_path.display(),
                    proxy.final_mean_val_loss
                );
            }
            println!(
                "run complete: metrics {}  final mean val loss {:.6}",
                primary.metrics_path.display(),
                primary.final_mean_val_loss
            );
            println!(
                "overhead: {:.2}% of wall clock in agent updates + alignment ({})",
                primary.timings.overhead_frac() * 100.0,
                primary.overhead_path.display()
            );
            if let Some(actor_path) = &primary.actor_path {
                println!("actor checkpoint: {}", actor_path.display());
            }
            if primary.grad_clip_events > 0 {
                println!(
                    "gradient clipping engaged {} times",
                    primary.grad_clip_events
                );
            }
            Ok(())
        }
        Command::Report {
            files,
            threshold,
            out,
        } => {
            let report = compare_report(&files, threshold)?;
            print!("{}", report.render_text());
            if let Some(path) = out {
                report.write_csv(&path)?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::DefaultConfig => {
            println!("{}", RunConfig::desk_default().to_json());
            Ok(())
        }
    }
}
