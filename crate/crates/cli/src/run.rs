//! Command implementations. Output layout under the root (`OIRL_OUT` or the
//! config's `output_dir`):
//!
//! ```text
//! expert/<hash>/seed-<s>/{demos.jsonl, expert.json}
//! train/<hash>/seed-<s>/{config.json, metrics.csv, options.csv, checkpoint.bin[.json], eval.json, done.json}
//! transfer/<hash>/{transfer.csv, transfer_seeds.csv, table.csv}
//! verify/<hash>/{summary.json, summary.csv}
//! ```

use anyhow::{anyhow, bail, Context, Result};
use oirl::checkpoint;
use oirl::config::{short_hash, DemoMode, RunConfig};
use oirl::env::{EnvSpec, Environment};
use oirl::metrics;
use oirl::options::ActMode;
use oirl::rollout::{self, DemoSet, FileHeader, TRAJECTORY_SCHEMA_VERSION};
use oirl::stats;
use oirl::trainer::{evaluate_policy, expert_demos, DemoSource, EvalStats, TrainState, Trainer};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub fn out_root(cfg: &RunConfig) -> PathBuf {
    std::env::var_os("OIRL_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.output_dir.clone())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn reset_dir(dir: &Path, force: bool) -> Result<()> {
    if force && dir.exists() {
        fs::remove_dir_all(dir).with_context(|| format!("removing {}", dir.display()))?;
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

#[derive(Serialize, Deserialize)]
struct ExpertSummary {
    config_hash: String,
    env: String,
    env_hash: String,
    seed: u64,
    n_demos: usize,
    mean_return: f64,
    start_value: f64,
    warnings: Vec<String>,
}

pub fn expert(cfg: &RunConfig, seed: u64, force: bool) -> Result<PathBuf> {
    let dir = out_root(cfg).join("expert").join(cfg.run_hash()).join(format!("seed-{seed}"));
    let summary = dir.join("expert.json");
    if summary.exists() && !force {
        eprintln!("{} exists; use --force to regenerate", summary.display());
        return Ok(dir);
    }
    reset_dir(&dir, force)?;
    let env = cfg.env.build()?;
    let demos = expert_demos(cfg, &env, seed)?;
    let header = FileHeader {
        version: TRAJECTORY_SCHEMA_VERSION,
        env: env.name.clone(),
        env_hash: env.mdp.content_hash(),
        generator: demos.generator.clone(),
    };
    rollout::write_demos(&dir.join("demos.jsonl"), &header, &demos)?;
    let values = rollout::make_expert_tabular(&env.mdp, cfg.expert)?.values;
    let start_value = env.mdp.initial.iter().zip(&values.v).map(|(p, v)| p * v).sum();
    write_json(
        &summary,
        &ExpertSummary {
            config_hash: cfg.run_hash(),
            env: env.name.clone(),
            env_hash: header.env_hash,
            seed,
            n_demos: demos.demos.len(),
            mean_return: demos.mean_return(),
            start_value,
            warnings: demos.warnings.clone(),
        },
    )?;
    Ok(dir)
}

fn demo_source(cfg: &RunConfig, env: &Environment, seed: u64) -> Result<DemoSource> {
    Ok(match cfg.demo_mode {
        DemoMode::SelfImitation => DemoSource::SelfImitation { n_traj: cfg.n_demos },
        DemoMode::Expert => match &cfg.demos {
            Some(path) => {
                let set: DemoSet = rollout::read_demos(path).with_context(|| format!("reading {}", path.display()))?;
                let want = env.mdp.content_hash();
                if !set.env_hash.is_empty() && set.env_hash != want {
                    bail!("demo file {} was made for env {} (run env {want})", path.display(), set.env_hash);
                }
                for w in &set.warnings {
                    eprintln!("warning: {w}");
                }
                DemoSource::Fixed(set)
            }
            None => DemoSource::Fixed(expert_demos(cfg, env, seed)?),
        },
    })
}

#[derive(Serialize, Deserialize)]
struct Done {
    config_hash: String,
    seed: u64,
    iterations: usize,
}

#[derive(Serialize, Deserialize)]
struct EvalSummary {
    config_hash: String,
    env: String,
    seed: u64,
    iterations: usize,
    greedy: EvalStats,
    stochastic: EvalStats,
}

pub fn run_dir(cfg: &RunConfig, seed: u64) -> PathBuf {
    out_root(cfg).join("train").join(cfg.run_hash()).join(format!("seed-{seed}"))
}

/// Keeps the comment and header lines plus data rows whose leading
/// iteration index is below `keep`.
fn truncate_csv(path: &Path, keep: usize) -> Result<()> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let it = line.split(',').next().and_then(|v| v.parse::<usize>().ok());
        let header = line.starts_with('#') || (i <= 1 && it.is_none());
        if header || it.is_some_and(|t| t < keep) {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Trains one seed. Returns a status line.
/// Learned per-option state rewards `g_ω(s)` in long format.
fn write_reward_tables(path: &Path, trainer: &Trainer, hash: &str) -> Result<()> {
    let tables = trainer.state.disc.reward_table(&trainer.env)?;
    let mut text = format!("{}option,state,reward\n", metrics::header_comment(hash));
    for (w, row) in tables.iter().enumerate() {
        for (s, g) in row.iter().enumerate() {
            if !trainer.env.is_terminal(s) {
                text.push_str(&format!("{w},{s},{g}\n"));
            }
        }
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn train_seed(cfg: &RunConfig, seed: u64, force: bool, resume: bool) -> Result<String> {
    let dir = run_dir(cfg, seed);
    let hash = cfg.run_hash();
    let done_path = dir.join("done.json");
    let ckpt = dir.join("checkpoint.bin");
    if done_path.exists() && !force {
        let done: Done = serde_json::from_str(&fs::read_to_string(&done_path)?)?;
        if done.iterations >= cfg.iterations {
            return Ok(format!("seed {seed}: up to date ({})", dir.display()));
        }
        if !resume {
            bail!(
                "{} holds a {}-iteration run; pass --resume to extend it or --force to restart",
                dir.display(),
                done.iterations
            );
        }
    } else if dir.join("metrics.csv").exists() && !force && !resume {
        bail!("{} holds a partial run; pass --resume or --force", dir.display());
    }
    reset_dir(&dir, force)?;
    let mut seed_cfg = cfg.clone();
    seed_cfg.seeds = vec![seed];
    write_json(&dir.join("config.json"), &seed_cfg)?;

    let env = cfg.env.build()?;
    let demos = demo_source(cfg, &env, seed)?;
    let metrics_path = dir.join("metrics.csv");
    let options_path = dir.join("options.csv");
    let state = if resume && ckpt.exists() && !force {
        let state = checkpoint::load(&ckpt, cfg, &env, seed)?;
        truncate_csv(&metrics_path, state.iteration)?;
        truncate_csv(&options_path, state.iteration)?;
        state
    } else {
        fs::write(&metrics_path, metrics::metrics_header(&hash))?;
        fs::write(&options_path, metrics::option_header(&hash))?;
        TrainState::init(cfg, &env, seed)
    };
    let start = state.iteration;
    let mut trainer = Trainer::from_state(cfg.clone(), env, demos, state);
    let open = |p: &Path| fs::OpenOptions::new().append(true).open(p);
    let mut mfile = open(&metrics_path)?;
    let mut ofile = open(&options_path)?;
    let mut failure: Option<anyhow::Error> = None;
    let remaining = cfg.iterations.saturating_sub(start);
    let outcome = trainer.run(remaining, &mut |m, st| {
        if failure.is_some() {
            return;
        }
        let res = (|| -> Result<()> {
            mfile.write_all(metrics::metrics_row(m).as_bytes())?;
            ofile.write_all(metrics::option_rows(m).as_bytes())?;
            if cfg.checkpoint_every > 0 && st.iteration % cfg.checkpoint_every == 0 {
                mfile.flush()?;
                ofile.flush()?;
                checkpoint::save(&ckpt, st, cfg)?;
            }
            Ok(())
        })();
        failure = res.err();
    });
    if let Err(e) = outcome {
        // Keep the diverged state for inspection without clobbering the last good checkpoint.
        mfile.flush()?;
        checkpoint::save(&dir.join("checkpoint-failed.bin"), &trainer.state, cfg)?;
        return Err(e.into());
    }
    if let Some(e) = failure {
        return Err(e);
    }
    checkpoint::save(&ckpt, &trainer.state, cfg)?;
    write_reward_tables(&dir.join("rewards.csv"), &trainer, &hash)?;
    let greedy = evaluate_policy(&trainer.state.nets, &trainer.env, cfg.eval_episodes, ActMode::Greedy, seed)?;
    let stochastic = evaluate_policy(&trainer.state.nets, &trainer.env, cfg.eval_episodes, ActMode::Stochastic, seed)?;
    write_json(
        &dir.join("eval.json"),
        &EvalSummary {
            config_hash: hash.clone(),
            env: trainer.env.name.clone(),
            seed,
            iterations: trainer.state.iteration,
            greedy,
            stochastic,
        },
    )?;
    write_json(
        &done_path,
        &Done {
            config_hash: hash,
            seed,
            iterations: trainer.state.iteration,
        },
    )?;
    Ok(format!(
        "seed {seed}: {} iterations, greedy return {:.4}, stochastic return {:.4} ({})",
        trainer.state.iteration,
        greedy.mean,
        stochastic.mean,
        dir.display()
    ))
}

pub fn train_all(cfg: &RunConfig, force: bool, resume: bool) -> Result<Vec<String>> {
    cfg.seeds
        .par_iter()
        .map(|&seed| train_seed(cfg, seed, force, resume).with_context(|| format!("seed {seed}")))
        .collect()
}

struct SeedEval {
    seed: u64,
    greedy: EvalStats,
    stochastic: EvalStats,
}

fn eval_transfer(cfg: &RunConfig, target: &EnvSpec, episodes: usize, seed: u64) -> Result<SeedEval> {
    let ckpt = run_dir(cfg, seed).join("checkpoint.bin");
    let train_env = cfg.env.build()?;
    let state = checkpoint::load(&ckpt, cfg, &train_env, seed)?;
    let test_env = target.build()?;
    if test_env.obs_dim() != train_env.obs_dim() || test_env.n_actions() != train_env.n_actions() {
        bail!(
            "{} is incompatible with {} (observation {} vs {})",
            test_env.name,
            train_env.name,
            test_env.obs_dim(),
            train_env.obs_dim()
        );
    }
    Ok(SeedEval {
        seed,
        greedy: evaluate_policy(&state.nets, &test_env, episodes, ActMode::Greedy, seed)?,
        stochastic: evaluate_policy(&state.nets, &test_env, episodes, ActMode::Stochastic, seed)?,
    })
}

pub fn transfer(cfgs: &[RunConfig], target: Option<&EnvSpec>, episodes: Option<usize>, force: bool) -> Result<PathBuf> {
    let first = cfgs.first().ok_or_else(|| anyhow!("no configs"))?;
    let mut parts: Vec<String> = cfgs.iter().map(|c| format!("{}:{:?}", c.run_hash(), c.seeds)).collect();
    parts.push(format!("{target:?}/{episodes:?}"));
    let dir = out_root(first).join("transfer").join(short_hash(&parts.join("+")));
    let table_path = dir.join("transfer.csv");
    if table_path.exists() && !force {
        eprintln!("{} exists; use --force to recompute", table_path.display());
        return Ok(dir);
    }
    reset_dir(&dir, force)?;
    let hash = short_hash(&parts.join("+"));

    let mut long = format!("{}task,n_options,mode,mean,std,n_seeds\n", metrics::header_comment(&hash));
    let mut per_seed = format!(
        "{}task,n_options,mode,seed,mean,std,episodes\n",
        metrics::header_comment(&hash)
    );
    let mut tasks: Vec<String> = Vec::new();
    let mut rows: Vec<(String, String, f64)> = Vec::new();
    for cfg in cfgs {
        let test = match target {
            Some(t) => t.clone(),
            None => cfg
                .env
                .transfer_target()
                .ok_or_else(|| anyhow!("{} has no standard transfer target; pass --target", cfg.env.label()))?,
        };
        // Reuses finished runs; trains missing ones.
        for line in train_all(cfg, false, true)? {
            eprintln!("{line}");
        }
        let n_ep = episodes.unwrap_or(cfg.eval_episodes);
        let evals: Vec<SeedEval> = cfg
            .seeds
            .par_iter()
            .map(|&s| eval_transfer(cfg, &test, n_ep, s))
            .collect::<Result<_>>()?;
        let task = format!("{}->{}", cfg.env.label(), test.label());
        if !tasks.contains(&task) {
            tasks.push(task.clone());
        }
        for (mode, pick) in [
            ("greedy", (|e: &SeedEval| e.greedy) as fn(&SeedEval) -> EvalStats),
            ("stochastic", |e: &SeedEval| e.stochastic),
        ] {
            let means: Vec<f64> = evals.iter().map(|e| pick(e).mean).collect();
            let (m, sd) = (stats::mean(&means), stats::std_dev(&means));
            long.push_str(&format!("{task},{},{mode},{m},{sd},{}\n", cfg.n_options, means.len()));
            for e in &evals {
                let st = pick(e);
                per_seed.push_str(&format!(
                    "{task},{},{mode},{},{},{},{}\n",
                    cfg.n_options, e.seed, st.mean, st.std, st.episodes
                ));
            }
            if mode == "stochastic" {
                rows.push((format!("oirl/{}", cfg.n_options), task.clone(), m));
            }
        }
    }
    // Wide table: one row per method and option count, one column per task.
    let mut methods: Vec<String> = Vec::new();
    for (m, _, _) in &rows {
        if !methods.contains(m) {
            methods.push(m.clone());
        }
    }
    let mut wide = format!("{}method,{}\n", metrics::header_comment(&hash), tasks.join(","));
    for m in &methods {
        let cells: Vec<String> = tasks
            .iter()
            .map(|t| {
                rows.iter()
                    .find(|(rm, rt, _)| rm == m && rt == t)
                    .map(|r| r.2.to_string())
                    .unwrap_or_default()
            })
            .collect();
        wide.push_str(&format!("{m},{}\n", cells.join(",")));
    }
    fs::write(dir.join("transfer_seeds.csv"), per_seed)?;
    fs::write(dir.join("table.csv"), wide)?;
    fs::write(&table_path, long)?;
    Ok(dir)
}

pub fn verify(root: &Path, opts: &oirl::verify::SuiteOptions, force: bool) -> Result<bool> {
    use oirl::verify::{run_suite, summary_csv, CheckResult, CheckStatus};
    let hash = short_hash(&serde_json::to_string(opts)?);
    let dir = root.join("verify").join(&hash);
    let json_path = dir.join("summary.json");
    let results: Vec<CheckResult> = if json_path.exists() && !force {
        eprintln!("{} exists; use --force to rerun", json_path.display());
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json_path)?)?;
        serde_json::from_value(v["checks"].clone())?
    } else {
        reset_dir(&dir, force)?;
        let results = run_suite(opts)?;
        write_json(
            &json_path,
            &serde_json::json!({ "config_hash": hash, "options": opts, "checks": results }),
        )?;
        fs::write(
            dir.join("summary.csv"),
            format!("{}{}", metrics::header_comment(&hash), summary_csv(&results)),
        )?;
        results
    };
    for r in &results {
        let tag = match r.status {
            CheckStatus::Pass => "pass",
            CheckStatus::Fail => "FAIL",
            CheckStatus::Recorded => "recorded",
        };
        println!("{tag:>8}  {}  {}", r.name, r.detail);
    }
    Ok(results.iter().all(|r| r.status != CheckStatus::Fail))
}
