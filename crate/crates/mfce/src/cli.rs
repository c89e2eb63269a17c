//! The `mfce` command line: corpus generation, training runs, architecture
//! inspection, and multi-delta sweeps. Configuration problems (unreadable or
//! invalid config, missing output directories) exit with code 2 before any
//! output is written; failures during a run exit with code 1.

use std::collections::VecDeque;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::convgeom::{geometry, intrinsic_length, output_count, ModelSpec};
use crate::corpus::{epoch_accounting, generate_corpus, load_corpus, save_corpus};
use crate::costmodel::{cost_report, window_cost};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::trainer::{train, EpochMetrics, TrainConfig};

#[derive(Parser)]
#[command(
    name = "mfce",
    version,
    about = "Training laboratory for multi-frame cross-entropy"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus file named by the config.
    Gen {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train one network and write metrics and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the architecture, its receptive field, and its cost profile.
    Inspect {
        #[arg(long)]
        config: PathBuf,
        /// Also write cost_report.json into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per delta and merge the results into sweep.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated list of deltas to train.
        #[arg(long, value_delimiter = ',')]
        deltas: Option<Vec<usize>>,
        /// Override the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Runs the CLI and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let prepared = match prepare(cli) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match execute(prepared) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

enum Prepared {
    Gen {
        config: RunConfig,
    },
    Train {
        config: RunConfig,
        out_dir: PathBuf,
    },
    Inspect {
        config: RunConfig,
        spec: ModelSpec,
        out_dir: Option<PathBuf>,
    },
    Sweep {
        config: RunConfig,
        deltas: Vec<usize>,
        out_dir: PathBuf,
    },
}

/// Phase one: load and validate the config and every path the command will
/// rely on. Nothing is created or modified here, so a failure (exit 2)
/// leaves no partial outputs behind.
fn prepare(cli: Cli) -> Result<Prepared> {
    match cli.command {
        Command::Gen { config } => {
            let config = RunConfig::load(&config)?;
            let target = &config.paths.corpus_file;
            let parent = target.parent().filter(|p| !p.as_os_str().is_empty());
            if let Some(parent) = parent {
                if !parent.is_dir() {
                    return Err(Error::Config(format!(
                        "corpus_file parent directory {} does not exist",
                        parent.display()
                    )));
                }
            }
            Ok(Prepared::Gen { config })
        }
        Command::Train { config, out } => {
            let config = RunConfig::load(&config)?;
            let out_dir = out.unwrap_or_else(|| config.paths.out_dir.clone());
            require_dir(&out_dir)?;
            Ok(Prepared::Train { config, out_dir })
        }
        Command::Inspect { config, out } => {
            let config = RunConfig::load(&config)?;
            let spec = config.model_spec(&config.corpus)?;
            if let Some(dir) = &out {
                require_dir(dir)?;
            }
            Ok(Prepared::Inspect {
                config,
                spec,
                out_dir: out,
            })
        }
        Command::Sweep {
            config,
            deltas,
            out,
        } => {
            let config = RunConfig::load(&config)?;
            let deltas = deltas.unwrap_or_else(|| vec![0, 2, 4, 8, 16]);
            if deltas.is_empty() {
                return Err(Error::Config("sweep needs at least one delta".into()));
            }
            let out_dir = out.unwrap_or_else(|| config.paths.out_dir.clone());
            require_dir(&out_dir)?;
            Ok(Prepared::Sweep {
                config,
                deltas,
                out_dir,
            })
        }
    }
}

fn require_dir(dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        return Err(Error::Config(format!(
            "output directory {} does not exist (it is never created implicitly)",
            dir.display()
        )));
    }
    Ok(())
}

fn execute(prepared: Prepared) -> Result<()> {
    match prepared {
        Prepared::Gen { config } => cmd_gen(&config),
        Prepared::Train { config, out_dir } => cmd_train(&config, &out_dir),
        Prepared::Inspect {
            config,
            spec,
            out_dir,
        } => cmd_inspect(&config, &spec, out_dir.as_deref()),
        Prepared::Sweep {
            config,
            deltas,
            out_dir,
        } => cmd_sweep(&config, &deltas, &out_dir),
    }
}

fn cmd_gen(config: &RunConfig) -> Result<()> {
    let corpus = generate_corpus(&config.corpus)?;
    save_corpus(&corpus, &config.paths.corpus_file)?;
    let frames: usize = corpus
        .train
        .iter()
        .chain(&corpus.heldout)
        .map(|u| u.features.len())
        .sum();
    println!(
        "wrote {} train + {} heldout utterances ({} frames, {} states, {} mel bins) to {}",
        corpus.train.len(),
        corpus.heldout.len(),
        frames,
        corpus.num_states,
        corpus.mel_bins,
        config.paths.corpus_file.display()
    );
    Ok(())
}

fn run_training(
    config: &RunConfig,
    train_cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<Vec<EpochMetrics>> {
    let corpus = load_corpus(&config.paths.corpus_file)?;
    let spec = config.model_spec(&config.corpus)?;
    let mut net = Network::build(&spec, train_cfg.seed)?;
    train(&mut net, &corpus, train_cfg, Some(out_dir))
}

fn cmd_train(config: &RunConfig, out_dir: &Path) -> Result<()> {
    let history = run_training(config, &config.train, out_dir)?;
    for m in &history {
        println!(
            "epoch {:>2}: train_nll {:.4} heldout_nll {:.4} heldout_fer {:.4} labels {} lr {:.6}",
            m.epoch, m.train_nll, m.heldout_nll, m.heldout_fer, m.labels_processed, m.lr
        );
    }
    println!("metrics and checkpoints written to {}", out_dir.display());
    Ok(())
}

fn cmd_inspect(config: &RunConfig, spec: &ModelSpec, out_dir: Option<&Path>) -> Result<()> {
    let l_m = intrinsic_length(spec);
    println!("receptive field: {l_m} frames");
    println!(
        "{:<5} {:<10} {:>9} {:>9} {:>10} {:>11}",
        "layer", "kind", "channels", "freq", "t_reduce", "cumulative"
    );
    for geo in geometry(spec)? {
        println!(
            "{:<5} {:<10} {:>4}->{:<4} {:>4}->{:<4} {:>10} {:>11}",
            geo.index,
            geo.label,
            geo.in_channels,
            geo.out_channels,
            geo.freq_in,
            geo.freq_out,
            geo.time_reduction,
            geo.cumulative_reduction
        );
    }
    let base = window_cost(spec, l_m)?;
    for delta in [0usize, 2, 4, 8, 16] {
        let cost = window_cost(spec, l_m + delta)?;
        let acc = epoch_accounting(1_000_000, l_m, delta)?;
        println!(
            "delta {:>2}: window {:>3} -> {} labels, {:.2} MFLOPs/window, {:.2} MFLOPs/label, ratio {:.4}, labels/epoch(1M frames) {}",
            delta,
            cost.window_len,
            output_count(spec, l_m + delta)?,
            cost.total_flops as f64 / 1e6,
            cost.flops_per_label / 1e6,
            cost.total_flops as f64 / base.total_flops as f64,
            acc.labels_per_epoch
        );
    }
    if let Some(dir) = out_dir {
        let report = cost_report(spec, config.train.delta, 5)?;
        let path = dir.join("cost_report.json");
        let mut f = File::create(&path)?;
        writeln!(f, "{}", serde_json::to_string_pretty(&report)?)?;
        println!("cost report written to {}", path.display());
    }
    Ok(())
}

fn thread_cap(requested: usize) -> usize {
    let hardware = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let cap = match std::env::var("MFCE_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .unwrap_or(hardware),
        Err(_) => hardware,
    };
    cap.min(requested).max(1)
}

fn cmd_sweep(config: &RunConfig, deltas: &[usize], out_dir: &Path) -> Result<()> {
    for &delta in deltas {
        std::fs::create_dir_all(out_dir.join(format!("delta{delta}")))?;
    }
    let queue: Mutex<VecDeque<usize>> = Mutex::new(deltas.iter().copied().collect());
    let results: Mutex<Vec<(usize, Vec<EpochMetrics>)>> = Mutex::new(Vec::new());
    let workers = thread_cap(deltas.len());

    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for _ in 0..workers {
            handles.push(scope.spawn(|| -> Result<()> {
                loop {
                    let delta = match queue.lock().expect("queue lock").pop_front() {
                        Some(d) => d,
                        None => return Ok(()),
                    };
                    let mut train_cfg = config.train.clone();
                    train_cfg.delta = delta;
                    let sub = out_dir.join(format!("delta{delta}"));
                    let history = run_training(config, &train_cfg, &sub)?;
                    println!("delta {delta}: finished {} epochs", history.len());
                    results.lock().expect("results lock").push((delta, history));
                }
            }));
        }
        for handle in handles {
            handle.join().expect("sweep worker panicked")?;
        }
        Ok(())
    })?;

    let mut results = results.into_inner().expect("results lock");
    results.sort_by_key(|(delta, _)| *delta);
    let path = out_dir.join("sweep.csv");
    let mut f = File::create(&path)?;
    writeln!(
        f,
        "delta,epoch,heldout_nll,heldout_fer,wall_seconds,labels_processed"
    )?;
    for (delta, history) in &results {
        for m in history {
            writeln!(
                f,
                "{},{},{},{},{:.3},{}",
                delta, m.epoch, m.heldout_nll, m.heldout_fer, m.wall_seconds, m.labels_processed
            )?;
        }
    }
    println!("sweep results written to {}", path.display());
    Ok(())
}
