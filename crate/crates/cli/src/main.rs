use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use toi_vsf::data::SynthParams;
use toi_vsf::eval::parse_settings;
use toi_vsf::eval::sweep::{SweepAxis, TrainMode};
use toi_vsf::tensor::OpKind;
use toi_vsf::{Error, Result};
use toi_vsf_cli::commands;
use toi_vsf_cli::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "toi-vsf",
    version,
    about = "Task-oriented imputation for variable subset forecasting"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic latent-factor dataset as CSV.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        n_vars: usize,
        #[arg(long, default_value_t = 3)]
        latents: usize,
        #[arg(long, default_value_t = 3000)]
        length: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0.3)]
        neg_frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the reference forecaster and the imputer/forecaster pair.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "joint")]
        mode: TrainMode,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score trained checkpoints on the test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt_dir: PathBuf,
        /// Where reports go; defaults to the checkpoint directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Comma separated: partial, oracle, toi, baseline:<zero|mean|gaussian|nearest_train_variable>.
        #[arg(long)]
        settings: Option<String>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train and evaluate once per value of k or alpha.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        axis: SweepAxis,
        /// Defaults to the config's eval.k_values or eval.alphas.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Option<Vec<f64>>,
        #[arg(long, default_value = "joint")]
        mode: TrainMode,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Compare every gradient rule with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `all` or a comma separated list of targets.
        #[arg(long, default_value = "all")]
        ops: String,
        /// Deliberately break one gradient rule (checks the checker).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

/// Flags that take precedence over the config file.
#[derive(clap::Args)]
struct Overrides {
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    k: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
}

fn load_config(path: &PathBuf, o: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = &o.seeds {
        cfg.train.seeds = s.clone();
    }
    if let Some(e) = o.epochs {
        cfg.train.epochs = e;
    }
    if let Some(k) = o.k {
        cfg.train.k = k;
    }
    if let Some(a) = o.alpha {
        cfg.train.alpha = a;
        cfg.train.beta = 1.0 - a;
    }
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Synth {
            out,
            n_vars,
            latents,
            length,
            noise,
            neg_frac,
            seed,
        } => {
            let p = SynthParams {
                n_vars,
                n_latents: latents,
                length,
                noise_std: noise,
                neg_fraction: neg_frac,
                seed,
            };
            commands::synth(&out, &p)?;
            println!("wrote {} ({length} x {n_vars})", out.display());
        }
        Cmd::Train {
            config,
            out_dir,
            mode,
            overrides,
        } => {
            let cfg = load_config(&config, &overrides)?;
            for m in commands::train(&cfg, &out_dir, mode)? {
                for (label, rec) in &m.stages {
                    println!(
                        "seed {} {label}: best epoch {} valid {:.5}",
                        m.seed, rec.best_epoch, rec.best_valid
                    );
                }
            }
        }
        Cmd::Eval {
            config,
            ckpt_dir,
            out_dir,
            settings,
            overrides,
        } => {
            let cfg = load_config(&config, &overrides)?;
            let settings = settings.as_deref().map(parse_settings).transpose()?;
            let out = out_dir.unwrap_or_else(|| ckpt_dir.clone());
            let report = commands::eval(&cfg, &ckpt_dir, &out, settings)?;
            print!("{}", toi_vsf::eval::format_text(&report));
        }
        Cmd::Sweep {
            config,
            out_dir,
            axis,
            values,
            mode,
            parallel,
            overrides,
        } => {
            let cfg = load_config(&config, &overrides)?;
            let values = values.unwrap_or_else(|| match axis {
                SweepAxis::K => cfg.eval.k_values.clone(),
                SweepAxis::Alpha => cfg.eval.alphas.clone(),
            });
            let table = commands::sweep(&cfg, &out_dir, axis, &values, mode, parallel)?;
            print!("{}", table.format_text());
        }
        Cmd::Gradcheck { seed, ops, corrupt } => {
            let corrupt = corrupt
                .map(|c| OpKind::from_name(&c).ok_or_else(|| Error::config(format!("unknown op `{c}`"))))
                .transpose()?;
            let list: Option<Vec<String>> =
                (ops != "all").then(|| ops.split(',').map(|s| s.trim().to_owned()).collect());
            let reports = commands::gradcheck(seed, list.as_deref(), corrupt)?;
            print!("{}", commands::format_gradcheck(&reports));
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                eprintln!("gradient check failed for: {}", failed.join(", "));
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Exit code of a failed gradient check: a numeric failure.
const GRADCHECK_FAILED: u8 = 3;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    toi_vsf_cli::tune_allocator();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(GRADCHECK_FAILED),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
