use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pefll_core::analysis::BoundConfig;
use pefll_core::data::DatasetFormat;
use pefll_core::experiment::{
    analyze_checkpoint, eval_checkpoint, predict_cli, run, sweep, ExperimentConfig, ExperimentError, Preset,
    PredictRequest, TransportKind, KEYS,
};

#[derive(Parser)]
#[command(name = "pefll", version, about = "Personalized federated learning with embedded hypernetworks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.local_steps=10` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run seed (run.seed)
    #[arg(long)]
    seed: Option<u64>,
    /// loopback or tcp (run.transport)
    #[arg(long)]
    transport: Option<TransportKind>,
    /// Output directory (run.out)
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, ExperimentError> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .map_err(|e| ExperimentError::Io { path: path.display().to_string(), msg: e.to_string() })?;
            cfg.apply_text(&text)?;
        }
        for o in &self.overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ExperimentError::Config {
                field: o.clone(),
                msg: "expected KEY=VALUE".into(),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            cfg.run.seed = s;
        }
        if let Some(t) = self.transport {
            cfg.run.transport = t;
        }
        if let Some(o) = &self.out {
            cfg.run.out = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configuration
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from the checkpoint in the output directory
        #[arg(long)]
        resume: bool,
    },
    /// Generate a personalised model for a new client's data
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Client data file
        #[arg(long)]
        data: PathBuf,
        /// csv, idx or cifar-binary
        #[arg(long, default_value = "csv")]
        format: DatasetFormat,
        /// Describe the client from images only
        #[arg(long)]
        unlabeled: bool,
        /// Descriptor batch size
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output model file; a `.manifest` is written next to it
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-evaluate a checkpoint on seen and unseen clients
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Force label masking on or off
        #[arg(long)]
        mask: Option<bool>,
    },
    /// Descriptor correlation, gradient norm and PAC-Bayes bound of a checkpoint
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Posterior variance used for all three parameter groups
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        /// Monte-Carlo draws
        #[arg(long, default_value_t = 8)]
        samples: usize,
    },
    /// Run an ablation grid: hyper-size, lambda-grid, embedding or extrapolation
    Sweep {
        #[arg(long)]
        preset: Preset,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// List every config key with its default
    Keys,
}

fn execute(cmd: Command) -> Result<(), ExperimentError> {
    match cmd {
        Command::Train { config, resume } => {
            let cfg = config.load()?;
            let outcome = run(&cfg, resume)?;
            if let Some(last) = outcome.rows.last() {
                println!(
                    "round {}: seen-client accuracy {:.4}, unseen-client accuracy {}",
                    last.round,
                    last.train_client_acc,
                    last.unseen_client_acc.map_or("n/a".into(), |a| format!("{a:.4}"))
                );
            }
            println!("wrote {}", cfg.run.out.display());
        }
        Command::Predict { checkpoint, data, format, unlabeled, batch, seed, out } => {
            let res = predict_cli(&PredictRequest { checkpoint, data, format, unlabeled, out, batch, seed })?;
            println!("{} parameters -> {}", res.params, res.model_path.display());
            println!("manifest -> {}", res.manifest_path.display());
        }
        Command::Eval { checkpoint, mask } => {
            let (seen, unseen) = eval_checkpoint(&checkpoint, mask)?;
            println!("seen_client_acc = {seen}");
            println!("unseen_client_acc = {}", unseen.map_or("n/a".into(), |a| a.to_string()));
        }
        Command::Analyze { checkpoint, alpha, delta, samples } => {
            let cfg = BoundConfig { alpha_h: alpha, alpha_v: alpha, alpha_theta: alpha, delta, samples };
            let r = analyze_checkpoint(&checkpoint, &cfg)?;
            println!("round = {}", r.round);
            println!("spearman = {}", r.spearman.map_or("n/a".into(), |s| s.to_string()));
            println!("grad_norm_sq = {}", r.grad_norm_sq);
            println!("pacbayes_bound_mean = {}", r.bound.mean);
            println!("pacbayes_bound_std = {}", r.bound.std);
        }
        Command::Sweep { preset, config } => {
            let cfg = config.load()?;
            let out: &Path = &cfg.run.out;
            let results = sweep(&cfg, preset, out)?;
            println!("{} runs, summary in {}", results.len(), out.join("summary.csv").display());
        }
        Command::Keys => {
            let cfg = ExperimentConfig::default();
            let mut text = String::new();
            for (key, doc) in KEYS {
                text.push_str(&format!("{key} = {}    # {doc}\n", cfg.get(key).unwrap_or_default()));
            }
            let _ = io::stdout().write_all(text.as_bytes());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
