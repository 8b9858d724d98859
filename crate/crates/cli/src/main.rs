use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedimb::config::{ExperimentConfig, DataSource, PRESETS, SWEEPS};
use fedimb::data::synthesize_longtail;
use fedimb::experiment::{analyze, evaluate_run, run_experiment, run_sweep, RunSummary};
use fedimb::{Error, Result};

/// Federated training under class imbalance: partition, train, evaluate
/// and analyze.
#[derive(Parser, Debug)]
#[command(name = "fedimb", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML experiment config; overrides the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base configuration when no --config is given.
    #[arg(long, default_value = "default")]
    preset: String,
    /// `section.key=value` override, repeatable; applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed for data synthesis, partitioning and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::preset(&self.preset)?,
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Partition the dataset and write the manifest and imbalance report.
    Partition(ConfigArgs),
    /// Run one experiment.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Validate and partition only.
        #[arg(long)]
        dry_run: bool,
    },
    /// Re-evaluate a finished run's checkpoint on its global test set.
    Evaluate { run: PathBuf },
    /// Write decision-curve, ROC, gradient-norm and rollout reports.
    Analyze { run: PathBuf },
    /// Write the configured synthetic dataset as a dataset directory.
    Synth(ConfigArgs),
    /// Run a preset sweep (one subdirectory per setting).
    Sweep {
        /// Sweep name.
        #[arg(long = "sweep", value_name = "NAME")]
        sweep: String,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dry_run: bool,
    },
    /// List the built-in presets and sweeps.
    Presets,
}

fn print_summary(s: &RunSummary) {
    if s.dry_run {
        println!("{}: dry run ok ({} test samples, tail classes {:?})", s.name, s.test_size, s.tail_classes);
        return;
    }
    println!(
        "{}: {} rounds, accuracy {:.4}, macro-F1 {:.4}, AUC {}, tail recall {:.4}",
        s.name,
        s.rounds,
        s.test.accuracy,
        s.test.f1,
        s.test.auc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "n/a".into()),
        s.tail_recall
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Partition(args) => {
            let cfg = args.resolve()?;
            print_summary(&run_experiment(&cfg, true)?);
            println!("wrote {}", cfg.out_dir.display());
        }
        Command::Train { cfg, dry_run } => {
            let cfg = cfg.resolve()?;
            print_summary(&run_experiment(&cfg, dry_run)?);
            println!("wrote {}", cfg.out_dir.display());
        }
        Command::Evaluate { run } => {
            let r = evaluate_run(&run)?;
            println!("{}", serde_json::to_string_pretty(&r).map_err(|e| Error::contract(e.to_string()))?);
        }
        Command::Analyze { run } => {
            let s = analyze(&run)?;
            println!(
                "analyzed {} run(s): {} DCA rows, {} ROC points, {} gradient-norm rows, {} rollout masks",
                s.runs.len(),
                s.dca_rows,
                s.roc_rows,
                s.grad_norm_rows,
                s.rollout_masks
            );
        }
        Command::Synth(args) => {
            let cfg = args.resolve()?;
            let DataSource::Synth(spec) = &cfg.data else {
                return Err(Error::config("data.source must be \"synth\" for the synth command"));
            };
            let data = synthesize_longtail(spec)?;
            data.save(&cfg.out_dir)?;
            println!("wrote {} samples, {} classes to {}", data.len(), data.num_classes(), cfg.out_dir.display());
        }
        Command::Sweep { sweep, cfg, dry_run } => {
            let base = cfg.resolve()?;
            for (_, s) in run_sweep(&base, &sweep, dry_run)? {
                print_summary(&s);
            }
            println!("wrote {}", base.out_dir.display());
        }
        Command::Presets => {
            println!("presets: {}", PRESETS.join(", "));
            println!("sweeps: {}", SWEEPS.join(", "));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
