mod run;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use oirl::config::RunConfig;
use oirl::env::EnvSpec;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "oirl", version, about = "Option-adversarial inverse RL on gridworlds")]
struct Cli {
    /// Worker threads for independent seeds (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Environment name, e.g. lava_crossing_m, flower_maze_r, recovery_grid.
    #[arg(long, value_parser = parse_env)]
    env: Option<EnvSpec>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    n_options: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the tabular expert and write demonstrations.
    Expert(Common),
    /// Train one run per seed.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the last checkpoint of an earlier run.
        #[arg(long)]
        resume: bool,
    },
    /// Train (or reuse) runs and evaluate them on the paired test environment.
    Transfer {
        /// One config per table row; may repeat.
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
        /// Test environment instead of the standard pair.
        #[arg(long, value_parser = parse_env)]
        target: Option<EnvSpec>,
        /// Episodes per seed and mode (default: the config's eval_episodes).
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Run the tabular verification suite.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Plant g = -r* in the recovery check (the suite must then fail).
        #[arg(long)]
        inject_negated_reward: bool,
        /// Output root override (otherwise OIRL_OUT or ./runs).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_env(name: &str) -> std::result::Result<EnvSpec, String> {
    EnvSpec::from_name(name, None).map_err(|e| e.to_string())
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(env) = &common.env {
        cfg.env = env.clone();
    }
    if let Some(n) = common.iterations {
        cfg.iterations = n;
    }
    if let Some(k) = common.n_options {
        cfg.n_options = k;
    }
    if let Some(s) = common.seed_override {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Command::Expert(common) => {
            let cfg = load_config(&common)?;
            for seed in &cfg.seeds {
                let dir = run::expert(&cfg, *seed, cli.force)?;
                println!("{}", dir.display());
            }
        }
        Command::Train { common, resume } => {
            let cfg = load_config(&common)?;
            for line in run::train_all(&cfg, cli.force, resume)? {
                println!("{line}");
            }
        }
        Command::Transfer {
            configs,
            seed_override,
            target,
            episodes,
        } => {
            let mut cfgs = Vec::new();
            for p in &configs {
                let common = Common {
                    config: Some(p.clone()),
                    seed_override,
                    env: None,
                    iterations: None,
                    n_options: None,
                };
                cfgs.push(load_config(&common)?);
            }
            let dir = run::transfer(&cfgs, target.as_ref(), episodes, cli.force)?;
            println!("{}", dir.display());
        }
        Command::Verify {
            seed,
            instances,
            inject_negated_reward,
            out,
        } => {
            if instances == 0 {
                bail!("--instances must be positive");
            }
            let opts = oirl::verify::SuiteOptions {
                seed,
                n_contraction_instances: instances,
                inject_negated_reward,
            };
            let root = out.unwrap_or_else(|| run::out_root(&RunConfig::default()));
            let ok = run::verify(&root, &opts, cli.force)?;
            return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
    }
    Ok(ExitCode::SUCCESS)
}
