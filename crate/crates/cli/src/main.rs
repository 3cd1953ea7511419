//! `lethe`: train a checkpoint zoo, fit the loss-conditioned weight
//! generator, sample unlearned classifiers, and score them against a
//! retrained reference — each step cached and ledgered under one
//! output root.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use lethe_cli::config::ExperimentConfig;
use lethe_cli::ledger::RunLedger;
use lethe_cli::pipeline::{run_pipeline, run_stage};
use lethe_cli::plots::{emit_plot_data, parse_figures};
use lethe_cli::stages::{
    StagePaths, STAGE_EVALUATE, STAGE_RETRAIN, STAGE_SAMPLE, STAGE_TRAIN, STAGE_ZOO,
};
use lethe_core::zoo::{load_zoo, rebalance_zoo, save_manifest, zoo_stats, RebalanceTarget};

#[derive(Parser)]
#[command(
    name = "lethe",
    version,
    about = "Loss-conditioned generation of unlearned classifier weights"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Rerun even when the cache says the stage is up to date.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train many classifiers and harvest the checkpoint zoo.
    ZooCollect(StageArgs),
    /// Print summary statistics of a collected zoo as JSON.
    ZooStats {
        #[arg(long)]
        config: PathBuf,
        /// Write the JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Resample the zoo's training pool toward a target loss histogram
    /// for one class, rewriting the manifest in place.
    ZooRebalance {
        #[arg(long)]
        config: PathBuf,
        /// Class whose loss histogram is reshaped.
        #[arg(long)]
        class: usize,
        /// Comma-separated relative weight per loss bin.
        #[arg(long)]
        weights: String,
        /// Pool size to draw; defaults to the current pool size.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit the diffusion hypernetwork on the zoo.
    Train(StageArgs),
    /// Sample candidate parameter vectors for the forget request and
    /// select the best one.
    Sample {
        #[command(flatten)]
        stage: StageArgs,
        /// Override the config's forget classes (comma-separated).
        #[arg(long)]
        forget: Option<String>,
        /// Override the number of candidates.
        #[arg(long)]
        n: Option<usize>,
        /// Override the sampling seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the from-scratch reference model without the forget classes.
    Retrain(StageArgs),
    /// Score candidates against the reference and write the report.
    Evaluate(StageArgs),
    /// Emit tidy CSVs for plotting (comma-separated figure list:
    /// selection, curve, alignment).
    Report {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        figures: String,
    },
    /// Run all five stages in order with caching.
    Pipeline(StageArgs),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    if let Err(err) = run(Cli::parse()) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn one_stage(args: &StageArgs, stage: &str) -> Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    one_stage_with(&cfg, args.force, stage)
}

fn one_stage_with(cfg: &ExperimentConfig, force: bool, stage: &str) -> Result<()> {
    let paths = StagePaths::new(cfg.resolved_output_root());
    std::fs::create_dir_all(&paths.root)?;
    let ledger = RunLedger::at_root(&paths.root);
    run_stage(cfg, &paths, &ledger, stage, force)?;
    Ok(())
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<usize>().with_context(|| format!("bad list entry {p:?}")))
        .collect()
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<f64>().with_context(|| format!("bad list entry {p:?}")))
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ZooCollect(args) => one_stage(&args, STAGE_ZOO),
        Command::Train(args) => one_stage(&args, STAGE_TRAIN),
        Command::Retrain(args) => one_stage(&args, STAGE_RETRAIN),
        Command::Evaluate(args) => one_stage(&args, STAGE_EVALUATE),
        Command::Pipeline(args) => {
            let cfg = ExperimentConfig::load(&args.config)?;
            let statuses = run_pipeline(&cfg, args.force)?;
            for (stage, status) in statuses {
                println!("{stage}: {status:?}");
            }
            Ok(())
        }
        Command::Sample {
            stage,
            forget,
            n,
            seed,
        } => {
            let mut cfg = ExperimentConfig::load(&stage.config)?;
            if let Some(list) = forget {
                cfg.sampler.forget_classes = parse_usize_list(&list)?;
                cfg.validate().context("applying --forget override")?;
            }
            if let Some(n) = n {
                cfg.sampler.num_candidates = n;
            }
            if let Some(seed) = seed {
                cfg.sampler.seed = seed;
            }
            one_stage_with(&cfg, stage.force, STAGE_SAMPLE)
        }
        Command::ZooStats { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let paths = StagePaths::new(cfg.resolved_output_root());
            let zoo = load_zoo(&paths.manifest())
                .with_context(|| format!("loading zoo via {}", paths.manifest().display()))?;
            let stats = zoo_stats(&zoo, &cfg.zoo.policy.pivot_classes);
            let json = serde_json::to_string_pretty(&stats)?;
            match out {
                Some(path) => std::fs::write(&path, json + "\n")
                    .with_context(|| format!("writing {}", path.display()))?,
                None => println!("{json}"),
            }
            Ok(())
        }
        Command::ZooRebalance {
            config,
            class,
            weights,
            samples,
            seed,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let paths = StagePaths::new(cfg.resolved_output_root());
            let zoo = load_zoo(&paths.manifest())
                .with_context(|| format!("loading zoo via {}", paths.manifest().display()))?;
            let target = RebalanceTarget {
                class_index: class,
                bin_weights: parse_f64_list(&weights)?,
            };
            let outcome = rebalance_zoo(&zoo, &target, samples, seed)?;
            save_manifest(&paths.manifest(), &outcome.manifest)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&serde_json::json!({
                    "class": class,
                    "pool_size": outcome.manifest.pool.as_ref().map(Vec::len),
                    "unreachable_bins": outcome.unreachable_bins,
                    "achieved_histogram": outcome.achieved_histogram,
                    "tv_distance": outcome.tv_distance,
                }))?
            );
            Ok(())
        }
        Command::Report { config, figures } => {
            let cfg = ExperimentConfig::load(&config)?;
            let paths = StagePaths::new(cfg.resolved_output_root());
            let written = emit_plot_data(&cfg, &paths, &parse_figures(&figures)?)?;
            for path in written {
                println!("{}", path.display());
            }
            Ok(())
        }
    }
}
