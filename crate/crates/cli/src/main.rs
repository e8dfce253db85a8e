//! `dre`: generate datasets, train, evaluate, explain and benchmark.
//!
//! Exit codes: 0 on success, 2 for input or configuration errors, 3 for
//! numeric failures such as training divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dre_core::envdata::load_bundle;
use dre_core::explain::ExplainerKind;
use dre_core::model::Model;
use dre_core::report::{cmd_benchmark, cmd_eval, cmd_explain, cmd_generate, cmd_train, RunConfig};
use dre_core::{DreError, Result};

#[derive(Parser)]
#[command(name = "dre", version, about = "Distributionally robust explanation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured dataset bundle and print its SHA-256.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Output bundle file.
        #[arg(long)]
        out: PathBuf,
        /// Overrides `data_seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model; writes a checkpoint and a history CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// A method (erm, mixup, dre) or a configured variant name.
        #[arg(long)]
        method: Option<String>,
    },
    /// Evaluate a checkpoint; writes metrics, insertion curves and attributions.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seed of the train/validation split the model was trained with.
        #[arg(long)]
        seed: Option<u64>,
        /// Label used in the report and file names.
        #[arg(long)]
        method: Option<String>,
    },
    /// Dump the attribution of a single sample as CSV (and PGM for images).
    Explain {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Environment id, e.g. `test` or `train0`.
        #[arg(long, default_value = "test")]
        env: String,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, value_enum)]
        explainer: Option<Explainer>,
        /// Output path without extension.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every (test env, method, seed) cell and summarise.
    Benchmark {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run this single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Run this single method instead of the configured ones.
        #[arg(long)]
        method: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Explainer {
    InputGradient,
    GradCam,
}

impl From<Explainer> for ExplainerKind {
    fn from(e: Explainer) -> Self {
        match e {
            Explainer::InputGradient => ExplainerKind::InputGradient,
            Explainer::GradCam => ExplainerKind::GradCam,
        }
    }
}

fn first_seed(cfg: &RunConfig, seed: Option<u64>) -> u64 {
    seed.unwrap_or(cfg.seeds[0])
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.data_seed = s;
            }
            let hash = cmd_generate(&cfg, &out)?;
            println!("{hash}  {}", out.display());
        }
        Command::Train { config, bundle, out, seed, method } => {
            let cfg = RunConfig::load(&config)?;
            let bundle = load_bundle(&bundle)?;
            let arm = cfg.arm(method.as_deref())?;
            let seed = first_seed(&cfg, seed);
            let t = cmd_train(&bundle, &cfg, &arm, seed, &out)?;
            println!(
                "selected step {} (validation {}); wrote {} and {}",
                t.history.selected_step,
                t.history.selected_val_metric,
                t.checkpoint.display(),
                t.history_csv.display()
            );
        }
        Command::Eval { config, bundle, checkpoint, out, seed, method } => {
            let cfg = RunConfig::load(&config)?;
            let bundle = load_bundle(&bundle)?;
            let model = Model::load(&checkpoint)?;
            let name = method.unwrap_or_else(|| cfg.train.method.name().to_string());
            let ev = cmd_eval(&model, &bundle, &cfg, &name, first_seed(&cfg, seed), &out)?;
            let r = &ev.report;
            println!(
                "{} {}: {} {:.4} (id {:.4}), dec {:.5}, iauc {:.4} (id {:.4}, skipped {}/{}), sc {:.4}",
                r.method,
                r.test_env,
                r.task_metric_name(),
                r.task_metric,
                r.task_metric_id,
                r.dec_raw,
                r.iauc,
                r.iauc_id,
                r.iauc_skipped,
                r.iauc_id_skipped,
                r.sc
            );
        }
        Command::Explain { bundle, checkpoint, env, index, explainer, out } => {
            let bundle = load_bundle(&bundle)?;
            let model = Model::load(&checkpoint)?;
            for p in cmd_explain(&model, &bundle, &env, index, explainer.map(Into::into), &out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Benchmark { config, out, seed, method } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            if let Some(m) = method {
                let arm = cfg.arms().into_iter().find(|a| a.name == m);
                match arm {
                    Some(_) => {
                        cfg.methods.retain(|x| x.name() == m);
                        cfg.variants.retain(|v| v.name == m);
                    }
                    None => {
                        cfg.methods = vec![m.parse()?];
                        cfg.variants.clear();
                    }
                }
            }
            let out = out
                .or_else(|| cfg.output_dir.clone())
                .ok_or_else(|| DreError::Config("no output directory: pass --out or set output_dir".into()))?;
            let res = cmd_benchmark(&cfg, &out, |c| eprintln!("done {} {} seed {}", c.method, c.test_env, c.seed))?;
            let value_name = res.reports.first().map(|r| r.task_metric_name()).unwrap_or("value");
            print!("{}", res.summary.to_text(value_name));
            println!("reports in {}", Path::new(&out).display());
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
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
