//! `ucvme` command-line tool.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ucvme::experiment::{self, ExperimentConfig};
use ucvme::Error;

#[derive(Parser)]
#[command(name = "ucvme", version, about = "Semi-supervised regression with co-trained dropout networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model pair and write metrics, loss history, bin report and checkpoints.
    Train(Common),
    /// Run all four variants over the configured seeds and write the ablation table.
    Ablate(Common),
    /// Train a model and report single-draw vs ensembled prediction error for several T.
    VarianceDemo(Common),
    /// Score saved checkpoints on the test partition.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Directory holding model_a.ckpt and model_b.ckpt (defaults to the output directory).
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Print the default benchmark config as TOML.
    DefaultConfig,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<(ExperimentConfig, PathBuf), Error> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        let out = self
            .out
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("ucvme-out"));
        log::info!("config hash {} seed {} -> {}", cfg.hash(), cfg.seed, out.display());
        Ok((cfg, out))
    }
}

fn report_written(dir: &Path, files: &[&str]) {
    for f in files {
        println!("wrote {}", dir.join(f).display());
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train(c) => {
            let (cfg, out) = c.resolve()?;
            let run = experiment::run_train(&cfg)?;
            experiment::write_train_artifacts(&cfg, &run, &out)?;
            let r = &run.outcome.result;
            println!(
                "{} seed {}: test MAE {:.6}, R2 {:.6}, best epoch {}",
                r.variant, r.seed, r.test_mae, r.test_r2, r.best_epoch
            );
            report_written(
                &out,
                &[
                    experiment::METRICS_FILE,
                    experiment::HISTORY_FILE,
                    experiment::BIN_REPORT_FILE,
                    experiment::CHECKPOINT_A,
                    experiment::CHECKPOINT_B,
                ],
            );
        }
        Command::Ablate(c) => {
            let (cfg, out) = c.resolve()?;
            let table = experiment::run_ablation(&cfg)?;
            experiment::write_ablation_artifacts(&table, &out)?;
            print!("{}", table.display());
            for r in table.runs.iter().filter(|r| r.error.is_some()) {
                log::warn!(
                    "{} seed {} failed: {}",
                    r.variant,
                    r.seed,
                    r.error.as_deref().unwrap_or_default()
                );
            }
            report_written(&out, &[experiment::ABLATION_FILE, experiment::ABLATION_RUNS_FILE]);
        }
        Command::VarianceDemo(c) => {
            let (cfg, out) = c.resolve()?;
            let demo = experiment::run_variance_demo(&cfg)?;
            experiment::write_variance_artifacts(&demo, &out)?;
            println!("{:>4} {:>12} {:>12} {:>12} {:>12}", "T", "mse_single", "mse_ens", "var_single", "var_ens");
            for r in &demo.rows {
                println!(
                    "{:>4} {:>12.6} {:>12.6} {:>12.6} {:>12.6}",
                    r.t_draws, r.mse_single, r.mse_ensemble, r.var_single, r.var_ensemble
                );
            }
            report_written(&out, &[experiment::VARIANCE_FILE]);
        }
        Command::Evaluate { common, checkpoints } => {
            let (cfg, out) = common.resolve()?;
            let ckpt = checkpoints.unwrap_or_else(|| out.clone());
            let rec = experiment::run_evaluate(&cfg, &ckpt)?;
            experiment::write_evaluation(&rec, &out)?;
            println!("test MAE {:.6}, R2 {:.6} on {} rows", rec.test_mae, rec.test_r2, rec.n_test);
            report_written(&out, &[experiment::EVALUATION_FILE]);
        }
        Command::DefaultConfig => print!("{}", ExperimentConfig::benchmark(0).to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
