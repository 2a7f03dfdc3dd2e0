use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use fedhier_core::comms::GammaTrigger;
use fedhier_core::experiment::{compare_runs, preset, run_experiment, ExperimentConfig, PRESETS};
use fedhier_core::federation::{Algorithm, ProxCenter};

#[derive(Parser)]
#[command(name = "fedhier", version, about = "Client-edge-cloud federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts.
    Run(RunArgs),
    /// Compare a metric across finished runs.
    Compare {
        /// Run directories (at least two).
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "global_test_acc")]
        metric: String,
        /// Also write the per-run table here as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// List the named presets.
    Presets,
    /// Print a preset as a JSON config, ready to edit and pass to `run --config`.
    Show { preset: String },
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    Sfedhp,
    Pfedme,
    Fedavg,
    Hierfavg,
    Fedprox,
}

impl From<AlgoArg> for Algorithm {
    fn from(a: AlgoArg) -> Self {
        match a {
            AlgoArg::Sfedhp => Algorithm::Sfedhp,
            AlgoArg::Pfedme => Algorithm::Pfedme,
            AlgoArg::Fedavg => Algorithm::Fedavg,
            AlgoArg::Hierfavg => Algorithm::Hierfavg,
            AlgoArg::Fedprox => Algorithm::Fedprox,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CenterArg {
    Edge,
    Client,
}

#[derive(Clone, Copy, ValueEnum)]
enum TriggerArg {
    Either,
    Both,
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON experiment config.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset (see `fedhier presets`).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of global rounds.
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long, value_enum)]
    algo: Option<AlgoArg>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Update every edge, then sample which ones upload.
    #[arg(long)]
    faithful_sampling: bool,
    #[arg(long, value_enum)]
    prox_center: Option<CenterArg>,
    #[arg(long, value_enum)]
    gamma_trigger: Option<TriggerArg>,
}

fn resolve(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), None) => {
            ExperimentConfig::load(path).with_context(|| format!("reading config {}", path.display()))?
        }
        (None, Some(name)) => preset(name)?,
        _ => bail!("pass exactly one of --config or --preset"),
    };
    let t = &mut cfg.training;
    if let Some(seed) = args.seed {
        t.seed = seed;
    }
    if let Some(rounds) = args.rounds {
        t.hp.rounds = rounds;
    }
    if let Some(algo) = args.algo {
        t.algorithm = algo.into();
    }
    if let Some(workers) = args.workers {
        t.workers = workers;
    }
    if args.faithful_sampling {
        t.faithful_sampling = true;
    }
    if let Some(c) = args.prox_center {
        t.prox_center = match c {
            CenterArg::Edge => ProxCenter::Edge,
            CenterArg::Client => ProxCenter::Client,
        };
    }
    if let Some(trigger) = args.gamma_trigger {
        let Some(s) = t.gamma_schedule.as_mut() else {
            bail!("--gamma-trigger needs a config with a gamma schedule");
        };
        s.trigger = match trigger {
            TriggerArg::Either => GammaTrigger::Either,
            TriggerArg::Both => GammaTrigger::Both,
        };
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn run(args: RunArgs) -> Result<()> {
    let cfg = resolve(&args)?;
    let artifacts = run_experiment(&cfg)?;
    match artifacts.outcome.log.records.last() {
        Some(r) => println!(
            "{}: {} rounds, global acc {:.4}, personal acc {:.4}, nonzero {:.3}, bits {} -> {}",
            cfg.training.algorithm.name(),
            r.round,
            r.global_test_acc,
            r.mean_personal_acc,
            r.sparsity_w,
            r.cumulative_bits,
            artifacts.output_dir.display()
        ),
        None => println!("no rounds run -> {}", artifacts.output_dir.display()),
    }
    Ok(())
}

fn show(name: &str) -> Result<()> {
    print!("{}", preset(name)?.to_json()?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Compare { runs, metric, csv } => compare_runs(&runs, &metric)
            .map_err(anyhow::Error::from)
            .and_then(|cmp| {
                print!("{cmp}");
                if let Some(path) = csv {
                    let file = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                    cmp.write_csv(file)?;
                }
                Ok(())
            }),
        Command::Show { preset: name } => show(&name),
        Command::Presets => {
            for p in PRESETS {
                println!("{p}");
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
