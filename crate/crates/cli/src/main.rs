use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use daan_core::data;
use daan_core::eval;
use daan_core::runner::{self, Checkpoint, ExperimentConfig, Trainer};

#[derive(Parser)]
#[command(name = "daan", version, about = "Discrepancy-aware attention network for audio-visual zero-shot learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
    /// key=value override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        for kv in &self.set {
            cfg.apply_override(kv)?;
        }
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and write it as feature files.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Write JSON lines instead of the binary format.
        #[arg(long)]
        jsonl: bool,
    },
    /// Train, evaluate and checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate the checkpoint in the output directory.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Base / +QDMA / +CSGM(V_c) / full table on shared data.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// One run per value of tcn.n or csgm.gamma.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
    },
    /// Summarize a run directory (loss curve, contribution rates, plots).
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData { common, jsonl } => {
            let cfg = common.config()?;
            let ds = data::generate_synthetic(&cfg.synth_config())?;
            let ext = if jsonl { "jsonl" } else { "daan" };
            data::save_dataset(&common.out, &ds, ext)?;
            println!(
                "wrote {} train / {} test samples to {} (split hash {:016x})",
                ds.train.len(),
                ds.test.len(),
                common.out.display(),
                ds.split_hash()
            );
        }
        Command::Train { common, resume } => {
            let cfg = common.config()?;
            let ds = runner::load_data(&cfg)?;
            let trainer = if resume {
                let path = common.out.join(runner::train::CHECKPOINT_FILE);
                let mut ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
                if ck.config.train.epochs > cfg.train.epochs {
                    bail!("checkpoint already has {} epochs", ck.config.train.epochs);
                }
                ck.config.train.epochs = cfg.train.epochs;
                Trainer::from_checkpoint(ck)?
            } else {
                Trainer::new(cfg)?
            };
            let run = runner::fit(trainer, &ds, Some(&common.out))?;
            println!("{}", run.report);
        }
        Command::Eval { common } => {
            let path = common.out.join(runner::train::CHECKPOINT_FILE);
            let ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
            let mut cfg = ck.config.clone();
            for kv in &common.set {
                cfg.apply_override(kv)?;
            }
            let ds = runner::load_data(&cfg)?;
            let report = eval::evaluate(&ck.model, &ds, cfg.fusion_rule)?;
            runner::train::write_report(&common.out, &report)?;
            println!("{report}");
        }
        Command::Ablate { common } => {
            let cfg = common.config()?;
            let rows = runner::ablate(&cfg, Some(&common.out))?;
            print!("{}", runner::ablation_table(&rows));
        }
        Command::Sweep { common, param, values } => {
            let cfg = common.config()?;
            let points = runner::sweep(&cfg, &param, &values, Some(&common.out))?;
            print!("{}", runner::sweep_csv(&points));
        }
        Command::Report { common } => {
            print!("{}", runner::report(&common.out)?);
        }
    }
    Ok(())
}
