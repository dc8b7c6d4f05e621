use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ibcnn_core::data::{read_dataset, synth_blobs, write_dataset};
use ibcnn_core::experiment::{cmd_compare, cmd_eval, cmd_sweep, cmd_train, format_value, ExperimentConfig, HeadName, SweepParam};
use ibcnn_core::Error;

/// Incremental boosting CNN: train, evaluate, compare heads and sweep
/// hyper-parameters on binary image tasks.
#[derive(Parser, Debug)]
#[command(name = "ibcnn", version)]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML). Defaults apply to missing fields.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// cnn, bcnn, ibcnn or ibcnn-s
    #[arg(long, global = true, value_name = "NAME")]
    head: Option<String>,

    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[arg(long, global = true, value_name = "N")]
    repeats: Option<usize>,

    /// Override any config field, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one head; writes checkpoint.ibck, train_log.csv and config.toml.
    Train,
    /// Score a dataset with a saved checkpoint.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Dataset container; defaults to the config's test split.
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
    },
    /// Train and evaluate every head in `heads`, `repeats` times each.
    Compare {
        /// Comma-separated head list.
        #[arg(long, value_delimiter = ',', value_name = "H1,H2,...")]
        heads: Vec<String>,
    },
    /// One compare per grid point.
    Sweep {
        /// eta-c, fc-width, learning-rate or beta
        #[arg(long, value_name = "NAME")]
        param: Option<String>,
        #[arg(long, value_delimiter = ',', value_name = "V1,V2,...")]
        grid: Vec<f64>,
        #[arg(long, value_delimiter = ',', value_name = "H1,H2,...")]
        heads: Vec<String>,
    },
    /// Write the configured train/test splits as dataset containers.
    Synth,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn parse_heads(names: &[String]) -> Result<Vec<HeadName>, Failure> {
    names.iter().map(|n| n.parse().map_err(Failure::from)).collect()
}

fn load_config(common: &Common, command: &Command) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::from_file(p).map_err(|e| match e {
            Error::File { source, .. } => Failure::Usage(format!("cannot read config {}: {source}", p.display())),
            other => other.into(),
        })?,
        None => ExperimentConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.dataset.seed = None;
    }
    if let Some(h) = &common.head {
        cfg.head = h.parse()?;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(r) = common.repeats {
        cfg.repeats = r;
    }
    match command {
        Command::Compare { heads } if !heads.is_empty() => cfg.heads = parse_heads(heads)?,
        Command::Sweep { param, grid, heads } => {
            if let Some(p) = param {
                let p: SweepParam = p.parse()?;
                if p != cfg.sweep.param {
                    cfg.sweep.grid.clear();
                }
                cfg.sweep.param = p;
            }
            if !grid.is_empty() {
                cfg.sweep.grid = grid.clone();
            }
            if !heads.is_empty() {
                cfg.heads = parse_heads(heads)?;
            }
        }
        _ => {}
    }
    Ok(cfg.resolve()?)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli.common, &cli.command)?;
    match &cli.command {
        Command::Train => {
            let outcome = cmd_train(&cfg)?;
            let last = outcome.reports.last();
            println!(
                "trained {} for {} iterations (config {}); final loss {}; {} active neurons",
                cfg.head,
                outcome.reports.len(),
                cfg.hash(),
                last.map(|r| r.loss.to_string()).unwrap_or_else(|| "n/a".into()),
                outcome.model.head.active_count(),
            );
            println!("checkpoint: {}", outcome.checkpoint.display());
            println!("log: {}", outcome.log.display());
        }
        Command::Eval { checkpoint, dataset } => {
            let data = match dataset {
                Some(p) => read_dataset(p)?,
                None => cfg.load_data()?.1,
            };
            let out = cli.common.out.as_deref();
            let report = cmd_eval(checkpoint, &data, out)?;
            println!("{report}");
        }
        Command::Compare { .. } => {
            let summaries = cmd_compare(&cfg)?;
            for s in &summaries {
                println!(
                    "{:8} F1 {:.4} ± {:.4}  2AFC {:.4} ± {:.4}  ({} runs)",
                    s.head,
                    s.f1_mean,
                    s.f1_std,
                    s.two_afc_mean,
                    s.two_afc_std,
                    s.runs.len()
                );
            }
            println!("wrote {}", cfg.out.join("compare.csv").display());
        }
        Command::Sweep { .. } => {
            let rows = cmd_sweep(&cfg)?;
            let mut failed = 0;
            for r in &rows {
                match &r.outcome {
                    Ok(s) => println!(
                        "{}={} {:8} F1 {:.4} ± {:.4}  2AFC {:.4}",
                        cfg.sweep.param.as_str(),
                        format_value(r.value),
                        r.head,
                        s.f1_mean,
                        s.f1_std,
                        s.two_afc_mean
                    ),
                    Err(e) => {
                        failed += 1;
                        println!("{}={} {:8} FAILED: {e}", cfg.sweep.param.as_str(), format_value(r.value), r.head);
                    }
                }
            }
            println!("wrote {}", cfg.out.join("sweep.csv").display());
            if failed > 0 {
                return Err(Failure::Runtime(format!("{failed} of {} sweep runs failed", rows.len())));
            }
        }
        Command::Synth => {
            let (train, test) = (
                synth_blobs(&cfg.dataset.blob_params(true))?,
                synth_blobs(&cfg.dataset.blob_params(false))?,
            );
            std::fs::create_dir_all(&cfg.out).map_err(|e| Failure::Runtime(e.to_string()))?;
            for (name, ds) in [("train.ibds", &train), ("test.ibds", &test)] {
                let path = cfg.out.join(name);
                write_dataset(&path, ds)?;
                println!("{}: {} samples, {} positive", path.display(), ds.len(), ds.positives());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
