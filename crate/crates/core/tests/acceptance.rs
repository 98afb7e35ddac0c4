//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs without the libtest harness so the summary lines are always printed.
//! Pass criterion numbers to run a subset:
//! `cargo test -p oirl --test acceptance -- 1 2 8`.

mod common;

use oirl::config::{DemoMode, RunConfig};
use oirl::discriminator::{d_prob, extract_reward};
use oirl::env::{EnvSpec, Encoding};
use oirl::grid::Side;
use oirl::metrics::{metrics_header, metrics_row, IterationMetrics};
use oirl::options::ActMode;
use oirl::rng::stream;
use oirl::stats;
use oirl::trainer::{evaluate_policy, Trainer};
use oirl::verify::{reward_recovery, run_suite, state_rewards, CheckStatus, SuiteOptions};
use rand::Rng;
use std::time::Instant;

const KERNEL_TOL: f64 = 1e-9;
const CONSISTENCY_TOL: f64 = 1e-12;
const RETURN_FAMILY_TOL: f64 = 1e-10;
const REWARD_TOL: f64 = 1e-9;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_MIN_COORDS: usize = 100;
const MC_MAX_Z: f64 = 3.0;
const GAE_TOL: f64 = 1e-10;
const THEOREM2_TOL: f64 = 1e-9;
const RECOVERY_MIN_CORR: f64 = 0.9;
const TRANSFER_MEAN_MARGIN: f64 = 0.05;
const NEUTRAL_ACC_BAND: f64 = 0.1;
const NEUTRAL_REWARD_BAND: f64 = 0.2;

const TRANSFER_SEEDS: u64 = 10;
const TRANSFER_ITERATIONS: usize = 300;
const TRANSFER_EPISODES: usize = 50;
const FLOWER_SEEDS: u64 = 3;
const SELF_IMITATION_ITERATIONS: usize = 100;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn exactness() -> Outcome {
    let ids = common::exactness(300, 1);
    let mut rng = stream(2, 0);
    let mut half_exact = true;
    let mut reward_err: f64 = 0.0;
    for _ in 0..10_000 {
        let lp = -30.0 * rng.random::<f64>();
        half_exact &= d_prob(lp, lp) == 0.5;
        let f = lp + 24.0 * rng.random::<f64>() - 12.0;
        let d = d_prob(lp, f);
        reward_err = reward_err.max((d.ln() - (1.0 - d).ln() - extract_reward(lp, f)).abs());
        reward_err = reward_err.max((extract_reward(lp, f) - (f - lp)).abs());
    }
    let mut passed = half_exact && reward_err <= REWARD_TOL;
    let mut parts = vec![format!("D(log pi)=1/2 exact: {half_exact}"), format!("logit {reward_err:.1e}")];
    for id in &ids {
        // The helper carries its own tolerance; the pinned ones here must agree.
        let pinned = match id.name {
            n if n.contains("normalization") => KERNEL_TOL,
            n if n.contains("consistency") => CONSISTENCY_TOL,
            n if n.contains("return family") => RETURN_FAMILY_TOL,
            n if n.contains("reward") => REWARD_TOL,
            _ => id.tolerance,
        };
        passed &= id.max_error <= pinned.min(id.tolerance);
        parts.push(format!("{} {:.1e}", id.name, id.max_error));
    }
    outcome(passed, parts.join("; "))
}

fn gradients() -> Outcome {
    let mut passed = true;
    let mut parts = Vec::new();
    let mut worst: std::collections::BTreeMap<&str, (f64, usize)> = Default::default();
    for seed in [0, 1] {
        for c in common::gradient_checks(seed) {
            passed &= c.coords >= GRAD_MIN_COORDS && c.max_rel_error < GRAD_REL_TOL;
            let e = worst.entry(c.name).or_insert((0.0, usize::MAX));
            e.0 = e.0.max(c.max_rel_error);
            e.1 = e.1.min(c.coords);
        }
    }
    for (name, (err, coords)) in worst {
        parts.push(format!("{name} {err:.1e}/{coords}"));
    }
    outcome(passed, parts.join("; "))
}

fn oracles() -> Outcome {
    let checks = common::monte_carlo_checks(10, 4000, 7);
    let gae = common::gae_max_error(200, 8);
    let mut passed = gae <= GAE_TOL;
    let mut parts = vec![format!("GAE {gae:.1e}")];
    for c in &checks {
        passed &= c.worst_z < MC_MAX_Z;
        parts.push(format!("{} z={:.2} (n={})", c.name, c.worst_z, c.comparisons));
    }
    outcome(passed, parts.join("; "))
}

fn theory() -> Outcome {
    let results = match run_suite(&SuiteOptions::default()) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| r.status == CheckStatus::Fail)
        .map(|r| r.name.as_str())
        .collect();
    let contraction = results.iter().filter(|r| r.name.starts_with("contraction/")).count();
    let theorem2 = results.iter().find(|r| r.name == "theorem2/exact_rewards");
    let t2 = theorem2.map_or(false, |r| r.status == CheckStatus::Pass);
    let decomp = results
        .iter()
        .filter(|r| r.name.starts_with("decomposability/") && r.status == CheckStatus::Pass)
        .count();
    let passed = failed.is_empty() && contraction > 0 && t2 && decomp >= 2;
    let detail = format!(
        "{} checks, {} recorded, failed {:?}; theorem2 tol {THEOREM2_TOL:.0e}: {}",
        results.len(),
        results.iter().filter(|r| r.status == CheckStatus::Recorded).count(),
        failed,
        theorem2.map_or("missing".to_string(), |r| r.detail.clone()),
    );
    outcome(passed, detail)
}

fn recovery() -> Outcome {
    let cfg = RunConfig::recovery();
    let iterations = cfg.iterations;
    let mut tr = match Trainer::with_expert_demos(cfg, 0) {
        Ok(t) => t,
        Err(e) => return outcome(false, e.to_string()),
    };
    if let Err(e) = tr.run(iterations, &mut |_, _| {}) {
        return outcome(false, e.to_string());
    }
    let report = tr.state.disc.reward_table(&tr.env).and_then(|g| {
        let r = state_rewards(&tr.env.mdp);
        reward_recovery(&tr.env.mdp, &g, &r, &vec![1.0; r.len()], RECOVERY_MIN_CORR)
    });
    match report {
        Ok(rep) => outcome(
            !rep.failure && rep.deterministic,
            format!(
                "{} states, corr {:?}, residual after offset {:?}",
                tr.env.mdp.n_states(),
                rep.correlations.iter().map(|c| format!("{c:.3}")).collect::<Vec<_>>(),
                rep.residuals.iter().map(|c| format!("{c:.3}")).collect::<Vec<_>>(),
            ),
        ),
        Err(e) => outcome(false, e.to_string()),
    }
}

fn fmt_list(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ")
}

/// Greedy and stochastic returns of each seed on the paired test environment.
fn transfer_returns(env: &EnvSpec, n_options: usize, seeds: u64) -> oirl::Result<(Vec<f64>, Vec<f64>)> {
    let target = env.transfer_target().expect("paired environment");
    let test_env = target.build()?;
    let (mut greedy, mut stochastic) = (Vec::new(), Vec::new());
    for seed in 0..seeds {
        let cfg = RunConfig {
            env: env.clone(),
            n_options,
            iterations: TRANSFER_ITERATIONS,
            ..RunConfig::default()
        };
        let mut tr = Trainer::with_expert_demos(cfg, seed)?;
        tr.run(TRANSFER_ITERATIONS, &mut |_, _| {})?;
        let nets = &tr.state.nets;
        greedy.push(evaluate_policy(nets, &test_env, TRANSFER_EPISODES, ActMode::Greedy, seed)?.mean);
        stochastic.push(evaluate_policy(nets, &test_env, TRANSFER_EPISODES, ActMode::Stochastic, seed)?.mean);
    }
    Ok((greedy, stochastic))
}

fn transfer() -> Outcome {
    let lava = EnvSpec::LavaCrossing {
        side: Side::Middle,
        size: 8,
        encoding: Encoding::Egocentric,
    };
    let flower = EnvSpec::FlowerMaze {
        side: Side::Right,
        size: 7,
        encoding: Encoding::Egocentric,
    };
    let run = || -> oirl::Result<Outcome> {
        let (one, one_st) = transfer_returns(&lava, 1, TRANSFER_SEEDS)?;
        let (four, four_st) = transfer_returns(&lava, 4, TRANSFER_SEEDS)?;
        let (m1, m4) = (stats::median(&one), stats::median(&four));
        let (a1, a4) = (stats::mean(&one), stats::mean(&four));
        let (f1, f1_st) = transfer_returns(&flower, 1, FLOWER_SEEDS)?;
        let (f4, f4_st) = transfer_returns(&flower, 4, FLOWER_SEEDS)?;
        Ok(outcome(
            m4 >= m1 && a4 - a1 >= TRANSFER_MEAN_MARGIN,
            format!(
                "lava M->R greedy median 1opt {m1:.3} 4opt {m4:.3}, mean 1opt {a1:.3} 4opt {a4:.3} \
                 (per seed {} / {}); stochastic mean 1opt {:.3} 4opt {:.3}; \
                 flower R->T (reported only) greedy mean 1opt {:.3} 4opt {:.3}, stochastic 1opt {:.3} 4opt {:.3}",
                fmt_list(&one),
                fmt_list(&four),
                stats::mean(&one_st),
                stats::mean(&four_st),
                stats::mean(&f1),
                stats::mean(&f4),
                stats::mean(&f1_st),
                stats::mean(&f4_st),
            ),
        ))
    };
    run().unwrap_or_else(|e| outcome(false, e.to_string()))
}

fn self_imitation() -> Outcome {
    let cfg = RunConfig {
        demo_mode: DemoMode::SelfImitation,
        iterations: SELF_IMITATION_ITERATIONS,
        ..RunConfig::default()
    };
    let mut log: Vec<IterationMetrics> = Vec::new();
    let res = Trainer::with_expert_demos(cfg, 0).and_then(|mut tr| tr.run(SELF_IMITATION_ITERATIONS, &mut |m, _| log.push(m.clone())));
    if let Err(e) = res {
        return outcome(false, e.to_string());
    }
    let tail = &log[log.len() - log.len() / 5..];
    let acc: Vec<f64> = tail.iter().map(|m| m.disc_accuracy).collect();
    let rew: Vec<f64> = tail.iter().map(|m| m.mean_extracted_reward).collect();
    let acc_dev = acc.iter().map(|a| (a - 0.5).abs()).fold(0.0, f64::max);
    let rew_dev = rew.iter().map(|r| r.abs()).fold(0.0, f64::max);
    outcome(
        acc_dev < NEUTRAL_ACC_BAND && rew_dev < NEUTRAL_REWARD_BAND,
        format!(
            "last {} iterations: max |acc-0.5| {acc_dev:.3} (mean acc {:.3}), max |reward| {rew_dev:.3} (mean {:.3})",
            tail.len(),
            stats::mean(&acc),
            stats::mean(&rew)
        ),
    )
}

fn metrics_csv(cfg: &RunConfig, seed: u64) -> oirl::Result<String> {
    let mut text = metrics_header(&cfg.run_hash());
    let mut tr = Trainer::with_expert_demos(cfg.clone(), seed)?;
    tr.run(cfg.iterations, &mut |m, _| text.push_str(&metrics_row(m)))?;
    Ok(text)
}

fn reproducibility() -> Outcome {
    let cfg = RunConfig {
        n_options: 2,
        iterations: 4,
        ..RunConfig::default()
    };
    match (metrics_csv(&cfg, 3), metrics_csv(&cfg, 3)) {
        (Ok(a), Ok(b)) => outcome(
            a == b && a.lines().count() == 2 + cfg.iterations,
            format!("{} bytes, identical: {}", a.len(), a == b),
        ),
        (Err(e), _) | (_, Err(e)) => outcome(false, e.to_string()),
    }
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 8] = [
        (1, "exactness", exactness),
        (2, "gradients", gradients),
        (3, "oracle equivalence", oracles),
        (4, "theory", theory),
        (5, "reward recovery", recovery),
        (6, "transfer direction", transfer),
        (7, "self-imitation neutrality", self_imitation),
        (8, "reproducibility", reproducibility),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (id, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let out = check();
        let verdict = if out.passed { "PASS" } else { "FAIL" };
        println!("criterion {id} {name}: {verdict} [{:.0?}] {}", t0.elapsed(), out.detail);
        if !out.passed {
            failures += 1;
        }
    }
    if failures > 0 {
        eprintln!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
