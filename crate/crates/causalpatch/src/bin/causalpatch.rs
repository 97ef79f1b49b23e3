//! Experiment runner CLI. All logic lives in the library; this binary only
//! parses flags, dispatches, and maps errors to exit codes (0 ok, 2 usage
//! or configuration, 3 numerical failure).

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use causalpatch::config::RunConfig;
use causalpatch::run;

#[derive(Parser)]
#[command(
    name = "causalpatch",
    about = "Train and evaluate causal patch-subset explanations of image classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Single seed override (replaces the config's seed list).
    #[arg(long)]
    seed: Option<u64>,
    /// Explanation size override; repeat for a sweep (replaces the list).
    #[arg(long = "k")]
    k: Vec<usize>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, causalpatch::Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let k = if self.k.is_empty() {
            None
        } else {
            Some(self.k.clone())
        };
        cfg.apply_overrides(self.out.clone(), self.seed, k);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the reference CNN black box and save its checkpoint.
    TrainBlackbox(Common),
    /// Train one causal selector per (k, seed) against the stored black box.
    TrainSelector(Common),
    /// Evaluate all configured methods and write reports plus a summary.
    Evaluate(Common),
    /// Write side-by-side explanation overlays for validation images.
    RenderOverlays {
        #[command(flatten)]
        common: Common,
        /// Number of validation images to render per k.
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Run the exact-enumeration oracle suite on synthetic joints.
    ToyOracle(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::TrainBlackbox(common) => common.resolve().and_then(|cfg| {
            let report = run::cmd_train_blackbox(&cfg)?;
            println!(
                "black box trained: test accuracy {:.4} in {:.1}s -> {}",
                report.test_accuracy,
                report.train_seconds,
                run::blackbox_path(&cfg).display()
            );
            Ok(())
        }),
        Command::TrainSelector(common) => common.resolve().and_then(|cfg| {
            let reports = run::cmd_train_selector(&cfg)?;
            for r in &reports {
                println!(
                    "selector k={} seed={} trained in {:.1}s (final loss {:.4})",
                    r.k,
                    r.seed,
                    r.train_seconds,
                    r.epoch_losses.last().copied().unwrap_or(f64::NAN)
                );
            }
            println!("{} checkpoints written", reports.len());
            Ok(())
        }),
        Command::Evaluate(common) => common.resolve().and_then(|cfg| {
            let summary = run::cmd_evaluate(&cfg)?;
            print!("{}", run::render_summary_table(&summary));
            Ok(())
        }),
        Command::RenderOverlays { common, count } => common.resolve().and_then(|cfg| {
            let written = run::cmd_render_overlays(&cfg, *count)?;
            println!("{} overlays written", written.len());
            Ok(())
        }),
        Command::ToyOracle(common) => common.resolve().and_then(|cfg| {
            let report = run::cmd_toy_oracle(&cfg)?;
            println!(
                "{} joints checked, 0 identity failures; xor CMI = {:.6} nats, best subset {:?}",
                report.joints_checked, report.xor_cmi_nats, report.xor_best_subset
            );
            println!(
                "selector recovery: {}/{} trials agree with brute force",
                report.selector_trials.iter().filter(|t| t.agree).count(),
                report.selector_trials.len()
            );
            Ok(())
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
