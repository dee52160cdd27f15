use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cogradar::config::{Overrides, ScenarioConfig};
use cogradar::gradcheck;
use cogradar::run::{self, TraceKind, TraceSpec};

#[derive(Parser)]
#[command(name = "cogradar", version, about = "Cognitive radar spectrum-sharing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    #[arg(long)]
    seed_env: Option<u64>,
    #[arg(long)]
    seed_agent: Option<u64>,
    #[arg(long)]
    seed_noise: Option<u64>,
    /// 1000 pulses per CPI, 500 offline CPIs, 70 evaluation CPIs.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_name = "BOOL")]
    continue_learning: Option<bool>,
}

impl Common {
    fn overrides(&self, checkpoint: Option<PathBuf>) -> Overrides {
        Overrides {
            seed_env: self.seed_env,
            seed_agent: self.seed_agent,
            seed_noise: self.seed_noise,
            paper_scale: self.paper_scale,
            out: self.out.clone(),
            continue_learning: self.continue_learning,
            checkpoint,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Offline phase; writes the checkpoint and reward curve.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluation phase; writes the metrics row and reward curve.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Several agents on one scene, plus the exact-dynamics optimum when known.
    Compare {
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Detection ROC per agent through the radar chain.
    Roc {
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Writes an interference trace file.
    TraceGen {
        #[arg(long, value_enum)]
        kind: TraceKind,
        #[arg(long, default_value_t = 5)]
        n_subbands: usize,
        #[arg(long, default_value_t = 0)]
        phase: usize,
        #[arg(long, default_value_t = 0.4)]
        p_switch: f64,
        #[arg(long, default_value = "00111")]
        active: String,
        #[arg(long)]
        length: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        path: PathBuf,
    },
    /// Finite-difference check of the network gradients.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

fn load(path: &Path, o: &Overrides) -> Result<ScenarioConfig> {
    let mut cfg = ScenarioConfig::load(path)?;
    cfg.apply(o)?;
    Ok(cfg)
}

fn load_all(paths: &[PathBuf], common: &Common) -> Result<(Vec<ScenarioConfig>, PathBuf)> {
    let o = common.overrides(None);
    let cfgs = paths.iter().map(|p| load(p, &o)).collect::<Result<Vec<_>>>()?;
    let out = common.out.clone().unwrap_or_else(|| cfgs[0].output_dir.clone());
    Ok((cfgs, out))
}

fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, common } => {
            let cfg = load(&config, &common.overrides(None))?;
            let r = run::cmd_train(&cfg)?;
            println!(
                "trained {} over {} CPIs; manifest {}",
                cfg.agent.kind.name(),
                r.log.cpi_mean_reward.len(),
                r.manifest.display()
            );
        }
        Command::Eval {
            config,
            checkpoint,
            common,
        } => {
            let cfg = load(&config, &common.overrides(checkpoint))?;
            let r = run::cmd_eval(&cfg)?;
            println!("{}", cogradar_core::radar::MetricsRow::CSV_HEADER);
            println!("{}", r.metrics.to_csv_row());
            println!("mean reward {:.4}", run::mean(&r.log.cpi_mean_reward));
        }
        Command::Compare { configs, common } => {
            let (cfgs, out) = load_all(&configs, &common)?;
            let r = run::cmd_compare(&cfgs, &out)?;
            for (l, c) in r.labels.iter().zip(&r.curves) {
                println!("{l}: mean reward {:.4}", run::mean(c));
            }
            if let Some(p) = &r.pi_star {
                println!("pi_star: mean reward {:.4}", run::mean(p));
            }
        }
        Command::Roc { configs, common } => {
            let (cfgs, out) = load_all(&configs, &common)?;
            let r = run::cmd_roc(&cfgs, &out)?;
            println!("wrote {} ROC curves; manifest {}", r.labels.len(), r.manifest.display());
        }
        Command::TraceGen {
            kind,
            n_subbands,
            phase,
            p_switch,
            active,
            length,
            seed,
            path,
        } => {
            let spec = TraceSpec {
                kind,
                n_subbands,
                phase,
                p_switch,
                active,
                length,
                seed,
            };
            run::cmd_trace_gen(&spec, &path)?;
        }
        Command::GradCheck { seeds } => {
            if seeds == 0 {
                bail!("--seeds must be positive");
            }
            let reports = gradcheck::run(seeds).context("gradient check")?;
            print!("{}", gradcheck::format_report(&reports));
            if reports.iter().any(|r| !(r.max_rel_error() <= gradcheck::TOLERANCE)) {
                eprintln!("gradient check failed: tolerance {:e}", gradcheck::TOLERANCE);
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
