//! `hubert-lab`: drive the iterative masked-prediction pipeline from a
//! JSON experiment config. Exit codes: 0 ok, 2 bad config or plan,
//! 3 training divergence, 4 I/O failure.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use hubert_lab::error::{Error, Result};
use hubert_lab::scheduler::{PlanContext, Strategy};

use config::{ExperimentConfig, PlanSection};

#[derive(Parser)]
#[command(
    name = "hubert-lab",
    version,
    about = "Iterative masked-prediction pretraining on a synthetic speech corpus"
)]
struct Cli {
    /// Experiment config JSON.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the config's output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Skip iterations whose final checkpoint already exists (train).
    #[arg(long, global = true)]
    resume: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize the corpus and save WAVs plus a manifest.
    Corpus,
    /// Resolve and print an iteration plan without running it.
    Plan(PlanArgs),
    /// Run the plan: cluster teacher features, pretrain, iterate.
    Train,
    /// Score each encoder layer against reference representations.
    Analyze {
        /// Run directory produced by `train`.
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
    },
    /// Linear probes plus CTC finetune error rates per iteration.
    Probe {
        /// Run directory produced by `train`.
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
    },
    /// Join probe and similarity reports across runs into one table.
    Compare {
        /// Run directories to join.
        #[arg(long, value_name = "DIR", num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
    },
}

/// Plan knobs; each flag overrides the config's plan section.
#[derive(Args)]
struct PlanArgs {
    /// original | uniform | progressive | progressive_cluster
    #[arg(long)]
    strategy: Option<String>,
    /// Total optimizer steps across all iterations.
    #[arg(long)]
    budget: Option<usize>,
    /// Number of iterations.
    #[arg(long, short = 'n')]
    n: Option<usize>,
    /// Floor on any iteration's steps.
    #[arg(long)]
    min_steps: Option<usize>,
    /// Cluster count (uniform, progressive).
    #[arg(long)]
    k: Option<usize>,
    /// First iteration's cluster count (original, progressive_cluster).
    #[arg(long)]
    k_start: Option<usize>,
    /// Last iteration's cluster count (original, progressive_cluster).
    #[arg(long)]
    k_end: Option<usize>,
    /// First iteration's budget share in (0, 0.5) (original).
    #[arg(long)]
    split: Option<f64>,
    /// Ceiling for the supervision-layer climb.
    #[arg(long)]
    layer_max: Option<usize>,
    /// Encoder depth the plan must fit (default: config encoder, else 6).
    #[arg(long)]
    model_layers: Option<usize>,
}

fn parse_strategy(s: &str) -> Result<Strategy> {
    match s {
        "original" => Ok(Strategy::Original),
        "uniform" => Ok(Strategy::Uniform),
        "progressive" => Ok(Strategy::Progressive),
        "progressive_cluster" | "progressive-cluster" => Ok(Strategy::ProgressiveCluster),
        other => Err(Error::config(format!(
            "unknown strategy `{other}` (original | uniform | progressive | progressive_cluster)"
        ))),
    }
}

impl PlanArgs {
    /// Config plan section with flag overrides; flags alone suffice.
    fn resolve(&self, cfg: Option<&ExperimentConfig>) -> Result<(PlanSection, usize)> {
        let base = cfg.map(|c| c.plan.clone());
        let strategy = match &self.strategy {
            Some(s) => parse_strategy(s)?,
            None => base
                .as_ref()
                .map(|b| b.strategy)
                .ok_or_else(|| Error::config("plan needs --strategy or --config"))?,
        };
        let budget = self
            .budget
            .or(base.as_ref().map(|b| b.budget))
            .ok_or_else(|| Error::config("plan needs --budget or --config"))?;
        let n = self
            .n
            .or(base.as_ref().map(|b| b.n))
            .or((strategy == Strategy::Original).then_some(2))
            .ok_or_else(|| Error::config("plan needs --n or --config"))?;
        let pick = |flag: Option<usize>, from: fn(&PlanSection) -> Option<usize>| {
            flag.or(base.as_ref().and_then(from))
        };
        let section = PlanSection {
            strategy,
            budget,
            n,
            min_steps: pick(self.min_steps, |b| b.min_steps),
            k: pick(self.k, |b| b.k),
            k_start: pick(self.k_start, |b| b.k_start),
            k_end: pick(self.k_end, |b| b.k_end),
            split: self.split.or(base.as_ref().and_then(|b| b.split)),
            layer_max: pick(self.layer_max, |b| b.layer_max),
        };
        let model_layers = self
            .model_layers
            .or(cfg.map(|c| c.encoder.layers))
            .unwrap_or(PlanContext::default().model_layers);
        Ok((section, model_layers))
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::config("this command needs --config <FILE>"))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

/// Optional config for commands that can run from the run-dir snapshot.
fn maybe_config(cli: &Cli) -> Result<Option<ExperimentConfig>> {
    cli.config.as_deref().map(ExperimentConfig::load).transpose()
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Corpus => {
            commands::cmd_corpus(&load_config(cli)?)?;
        }
        Cmd::Plan(args) => {
            let cfg = maybe_config(cli)?;
            let (section, model_layers) = args.resolve(cfg.as_ref())?;
            commands::cmd_plan(&section, model_layers)?;
        }
        Cmd::Train => {
            commands::cmd_train(&load_config(cli)?, cli.resume)?;
        }
        Cmd::Analyze { run } => {
            commands::cmd_analyze(run, maybe_config(cli)?.as_ref())?;
        }
        Cmd::Probe { run } => {
            commands::cmd_probe(run, maybe_config(cli)?.as_ref())?;
        }
        Cmd::Compare { runs } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
            commands::cmd_compare(runs, &out)?;
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    if let Err(e) = dispatch(&cli) {
        // single line, machine-parsable
        let msg = e.to_string().replace('\n', " ");
        eprintln!("error: {msg}");
        std::process::exit(e.exit_code());
    }
}
