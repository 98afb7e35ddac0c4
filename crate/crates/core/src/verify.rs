//! Exact numeric checks on enumerable MDPs: decomposability, constant-offset
//! reward recovery, contraction of the option Bellman update under
//! approximate rewards, the induced convergence inequality, and the
//! discriminator fixed point.
//!
//! Reward tables here are state rewards: `g[ω][s]` per option and `r[s]`.

use crate::discriminator::{d_prob, extract_reward};
use crate::mdp::{TabularMdp, Transition};
use crate::options::{option_values, TabularOptions};
use crate::stats::pearson;
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Decomposability

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposability {
    pub decomposable: bool,
    pub n_classes: usize,
    /// Two states in different classes, when not decomposable.
    pub witness: Option<(usize, usize)>,
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// States are 1-step linked when some state reaches both of them in one
/// step (under any pair of actions); decomposability asks whether the
/// transitive closure of that relation covers all states in `mask` (all
/// states when `None`).
pub fn check_decomposability(mdp: &TabularMdp, mask: Option<&[bool]>) -> Decomposability {
    let n = mdp.n_states();
    let keep = |s: usize| mask.is_none_or(|m| m[s]);
    let mut parent: Vec<usize> = (0..n).collect();
    for s in 0..n {
        let mut first: Option<usize> = None;
        for a in 0..mdp.n_actions() {
            for t in mdp.row(s, a) {
                if t.prob <= 0.0 || !keep(t.next) {
                    continue;
                }
                match first {
                    None => first = Some(t.next),
                    Some(f) => {
                        let (ra, rb) = (find(&mut parent, f), find(&mut parent, t.next));
                        if ra != rb {
                            parent[ra.max(rb)] = ra.min(rb);
                        }
                    }
                }
            }
        }
    }
    let members: Vec<usize> = (0..n).filter(|&s| keep(s)).collect();
    let mut roots: Vec<usize> = members.iter().map(|&s| find(&mut parent, s)).collect();
    let witness = members
        .iter()
        .zip(&roots)
        .find(|(_, &r)| r != roots[0])
        .map(|(&s, _)| (members[0], s));
    roots.sort_unstable();
    roots.dedup();
    Decomposability {
        decomposable: roots.len() <= 1,
        n_classes: roots.len(),
        witness,
    }
}

// ---------------------------------------------------------------------------
// Reward recovery

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    /// `ĉ_ω`: occupancy-weighted mean of `g_ω - r*`.
    pub offsets: Vec<f64>,
    /// `max_s |g_ω(s) - r*(s) - ĉ_ω|` over visited states.
    pub residuals: Vec<f64>,
    pub correlations: Vec<f64>,
    pub deterministic: bool,
    pub decomposable: bool,
    /// Some option's correlation fell below the threshold.
    pub failure: bool,
}

/// Compares learned state rewards with the true ones over states with
/// positive `weights` (typically the expert occupancy).
pub fn reward_recovery(
    mdp: &TabularMdp,
    g: &[Vec<f64>],
    r_star: &[f64],
    weights: &[f64],
    threshold: f64,
) -> Result<RecoveryReport> {
    let n = mdp.n_states();
    if r_star.len() != n || weights.len() != n || g.iter().any(|row| row.len() != n) {
        return Err(Error::Shape {
            context: "recovery tables",
            expected: n,
            got: r_star.len(),
        });
    }
    let visited: Vec<usize> = (0..n).filter(|&s| weights[s] > 0.0).collect();
    let total: f64 = visited.iter().map(|&s| weights[s]).sum();
    let rs: Vec<f64> = visited.iter().map(|&s| r_star[s]).collect();
    let mut offsets = Vec::new();
    let mut residuals = Vec::new();
    let mut correlations = Vec::new();
    for row in g {
        let c = visited.iter().map(|&s| weights[s] * (row[s] - r_star[s])).sum::<f64>() / total;
        let res = visited
            .iter()
            .map(|&s| (row[s] - r_star[s] - c).abs())
            .fold(0.0, f64::max);
        let gs: Vec<f64> = visited.iter().map(|&s| row[s]).collect();
        offsets.push(c);
        residuals.push(res);
        correlations.push(pearson(&gs, &rs));
    }
    let deterministic = (0..n).all(|s| (0..mdp.n_actions()).all(|a| mdp.row(s, a).len() == 1));
    let nonterminal: Vec<bool> = mdp.terminal.iter().map(|t| !t).collect();
    Ok(RecoveryReport {
        failure: correlations.iter().any(|&c| c < threshold),
        offsets,
        residuals,
        correlations,
        deterministic,
        decomposable: check_decomposability(mdp, Some(&nonterminal)).decomposable,
    })
}

// ---------------------------------------------------------------------------
// Contraction

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    /// `‖Q_t - Q*‖∞` for `t = 0..=n_iters`.
    pub errors: Vec<f64>,
    /// Largest ratio of successive update sizes.
    pub contraction_factor: f64,
    pub gamma: f64,
    /// `max_ω c_ω` with `c_ω = max_s |g_ω(s) - r*(s)|`.
    pub max_offset: f64,
    /// First step violating `err_{t+1} <= γ err_t + max c`, if any.
    pub violation_step: Option<usize>,
    /// `γ^T err_0 + max c / (1 - γ)`.
    pub limit_bound: f64,
    pub within_limit: bool,
}

impl ContractionReport {
    pub fn passed(&self) -> bool {
        self.violation_step.is_none() && self.within_limit && self.contraction_factor <= self.gamma + 1e-6
    }
}

/// Option Bellman update with state rewards `g`:
/// `Q'(s,ω) = g_ω(s) + γ Σ_a π_ω(a|s) Σ_{s'} P(s'|s,a) [(1-β_ω(s')) Q(s',ω) + β_ω(s') max_ω' Q(s',ω')]`,
/// with zero value at terminal states.
pub fn option_bellman(mdp: &TabularMdp, opts: &TabularOptions, g: &[Vec<f64>], q: &[f64]) -> Vec<f64> {
    let (n, k) = (mdp.n_states(), opts.n_options);
    let best: Vec<f64> = (0..n)
        .map(|s| q[s * k..(s + 1) * k].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut out = vec![0.0; n * k];
    for s in 0..n {
        if mdp.terminal[s] {
            continue;
        }
        for w in 0..k {
            let mut cont = 0.0;
            for a in 0..opts.n_actions {
                let pa = opts.pi(s, w, a);
                if pa == 0.0 {
                    continue;
                }
                for t in mdp.row(s, a) {
                    if mdp.terminal[t.next] {
                        continue;
                    }
                    let b = opts.beta(t.next, w);
                    cont += pa * t.prob * ((1.0 - b) * q[t.next * k + w] + b * best[t.next]);
                }
            }
            out[s * k + w] = g[w][s] + mdp.gamma * cont;
        }
    }
    out
}

fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Fixed point of [`option_bellman`] by iteration.
pub fn solve_option_bellman(mdp: &TabularMdp, opts: &TabularOptions, g: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut q = vec![0.0; mdp.n_states() * opts.n_options];
    for _ in 0..1_000_000 {
        let next = option_bellman(mdp, opts, g, &q);
        let d = sup_dist(&next, &q);
        q = next;
        if d < 1e-13 {
            return Ok(q);
        }
    }
    Err(Error::NoConvergence {
        iterations: 1_000_000,
        residual: f64::NAN,
    })
}

pub fn max_offset(g: &[Vec<f64>], r_star: &[f64], terminal: &[bool]) -> f64 {
    g.iter()
        .map(|row| {
            row.iter()
                .zip(r_star)
                .zip(terminal)
                .filter(|(_, &t)| !t)
                .map(|((x, y), _)| (x - y).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

pub fn contraction_test(
    mdp: &TabularMdp,
    opts: &TabularOptions,
    g: &[Vec<f64>],
    r_star: &[f64],
    n_iters: usize,
) -> Result<ContractionReport> {
    let k = opts.n_options;
    let star: Vec<Vec<f64>> = vec![r_star.to_vec(); k];
    let q_star = solve_option_bellman(mdp, opts, &star)?;
    let c = max_offset(g, r_star, &mdp.terminal);
    let gamma = mdp.gamma;
    let mut q = vec![0.0; q_star.len()];
    let mut errors = vec![sup_dist(&q, &q_star)];
    let mut violation_step = None;
    let mut factor: f64 = 0.0;
    let mut last_step: Option<f64> = None;
    let err_scale = q_star.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    for t in 0..n_iters {
        let next = option_bellman(mdp, opts, g, &q);
        let step = sup_dist(&next, &q);
        if let Some(prev) = last_step {
            // Ratios of updates near round-off carry no information.
            if prev > 1e-8 * (1.0 + err_scale) {
                factor = factor.max(step / prev);
            }
        }
        last_step = Some(step);
        q = next;
        let err = sup_dist(&q, &q_star);
        let bound = gamma * errors[t] + c;
        if err > bound + 1e-12 * (1.0 + bound) && violation_step.is_none() {
            violation_step = Some(t);
        }
        errors.push(err);
    }
    let limit_bound = gamma.powi(n_iters as i32) * errors[0] + c / (1.0 - gamma);
    let within_limit = errors[n_iters] <= limit_bound + 1e-12;
    Ok(ContractionReport {
        errors,
        contraction_factor: factor,
        gamma,
        max_offset: c,
        violation_step,
        limit_bound,
        within_limit,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Report {
    /// `max_{s,ω} |g_ω(s) + γ E[U_Q(s',ω)] - Q*(s,ω)|`.
    pub lhs: f64,
    /// `(max_ω c_ω)(ε + max_ω c_ω) γ`.
    pub bound: f64,
    pub epsilon: f64,
    /// `lhs - bound`; at most 0 when the inequality holds.
    pub max_violation: f64,
}

/// Evaluates the convergence inequality for a given `Q` with
/// `ε = ‖Q - Q*‖∞`.
pub fn theorem2_inequality(
    mdp: &TabularMdp,
    opts: &TabularOptions,
    g: &[Vec<f64>],
    r_star: &[f64],
    q: &[f64],
) -> Result<Theorem2Report> {
    let k = opts.n_options;
    let star: Vec<Vec<f64>> = vec![r_star.to_vec(); k];
    let q_star = solve_option_bellman(mdp, opts, &star)?;
    let epsilon = sup_dist(q, &q_star);
    let c = max_offset(g, r_star, &mdp.terminal);
    let applied = option_bellman(mdp, opts, g, q);
    let lhs = sup_dist(&applied, &q_star);
    let bound = c * (epsilon + c) * mdp.gamma;
    Ok(Theorem2Report {
        lhs,
        bound,
        epsilon,
        max_violation: lhs - bound,
    })
}

// ---------------------------------------------------------------------------
// Discriminator fixed point

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    /// `max |D - 0.5|` with `f = log π^E_ω`; exactly 0 when the plug-in holds.
    pub max_abs_d_minus_half: f64,
    /// `max |extract_reward|` at the plug-in.
    pub max_abs_reward: f64,
    /// Correlation of `f* = log π^E` with the exact advantages `A(s,a,ω)`.
    pub advantage_correlation: f64,
}

/// Plugs `f = log π^E_ω(a|s)` into the discriminator over all non-terminal
/// `(s, a, ω)` and compares it with the exact option advantages under the
/// MDP's own reward.
pub fn lemma1_fixed_point(mdp: &TabularMdp, expert: &TabularOptions) -> Result<Lemma1Report> {
    let (n, k, na) = (mdp.n_states(), expert.n_options, expert.n_actions);
    let per_step = crate::options::env_reward_table(mdp, k);
    let values = option_values(mdp, expert, &per_step)?;
    let mut max_d: f64 = 0.0;
    let mut max_r: f64 = 0.0;
    let mut fs = Vec::new();
    let mut adv = Vec::new();
    for s in (0..n).filter(|&s| !mdp.terminal[s]) {
        for w in 0..k {
            for a in 0..na {
                let lp = expert.pi(s, w, a).ln();
                max_d = max_d.max((d_prob(lp, lp) - 0.5).abs());
                max_r = max_r.max(extract_reward(lp, lp).abs());
                if lp.is_finite() {
                    fs.push(lp);
                    adv.push(values.advantage(s, a, w));
                }
            }
        }
    }
    Ok(Lemma1Report {
        max_abs_d_minus_half: max_d,
        max_abs_reward: max_r,
        advantage_correlation: pearson(&fs, &adv),
    })
}

// ---------------------------------------------------------------------------
// Random instances

/// Random MDP with `branching` successors per row, state-dependent rewards
/// in [0, 1] and no terminal states.
pub fn random_instance<R: Rng + ?Sized>(
    n_states: usize,
    n_actions: usize,
    branching: usize,
    gamma: f64,
    rng: &mut R,
) -> Result<TabularMdp> {
    let reward: Vec<f64> = (0..n_states).map(|_| rng.random::<f64>()).collect();
    let mut rows = Vec::with_capacity(n_states * n_actions);
    for s in 0..n_states {
        for _ in 0..n_actions {
            let mut weights: Vec<(usize, f64)> = (0..branching.max(1))
                .map(|_| (rng.random_range(0..n_states), 0.1 + rng.random::<f64>()))
                .collect();
            let total: f64 = weights.iter().map(|w| w.1).sum();
            weights.iter_mut().for_each(|w| w.1 /= total);
            rows.push(
                weights
                    .into_iter()
                    .map(|(next, prob)| Transition {
                        next,
                        prob,
                        reward: reward[s],
                    })
                    .collect(),
            );
        }
    }
    let initial = vec![1.0 / n_states as f64; n_states];
    TabularMdp::new(n_states, n_actions, rows, gamma, vec![false; n_states], initial, 1.0)
}

/// State reward `r(s) = R(s, a)` of an MDP whose rewards ignore the action.
pub fn state_rewards(mdp: &TabularMdp) -> Vec<f64> {
    (0..mdp.n_states()).map(|s| mdp.reward(s, 0)).collect()
}

// ---------------------------------------------------------------------------
// Suite

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    /// Computed and reported without a pass/fail claim.
    Recorded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub status: CheckStatus,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, ok: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            status: if ok { CheckStatus::Pass } else { CheckStatus::Fail },
            detail,
        }
    }

    fn recorded(name: &str, detail: String) -> Self {
        Self {
            name: name.to_string(),
            status: CheckStatus::Recorded,
            detail,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteOptions {
    pub seed: u64,
    pub n_contraction_instances: usize,
    /// Replace the planted recovery solution by `-r*` (must fail).
    pub inject_negated_reward: bool,
}

/// Two-state chain that can never mix: state 0 and 1 each loop to themselves.
pub fn unlinked_pair() -> TabularMdp {
    let p = [1.0, 0.0, 0.0, 1.0];
    TabularMdp::from_dense(2, 1, &p, &[0.0, 0.0], 0.9, vec![false, false], vec![0.5, 0.5])
        .expect("valid hand-built MDP")
}

/// Three states under a uniform kernel.
pub fn uniform_kernel(n: usize) -> TabularMdp {
    let p = vec![1.0 / n as f64; n * n];
    TabularMdp::from_dense(n, 1, &p, &vec![0.0; n], 0.9, vec![false; n], vec![1.0 / n as f64; n])
        .expect("valid hand-built MDP")
}

pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CheckResult>> {
    let mut rng = crate::rng::stream(opts.seed, 0x7e51);
    let mut out = Vec::new();

    let d = check_decomposability(&uniform_kernel(3), None);
    out.push(CheckResult::new("decomposability/uniform_kernel", d.decomposable, format!("{d:?}")));
    let d = check_decomposability(&unlinked_pair(), None);
    out.push(CheckResult::new(
        "decomposability/unlinked_pair",
        !d.decomposable && d.witness.is_some(),
        format!("{d:?}"),
    ));
    let mut lava = crate::grid::build_lava_crossing(crate::grid::Side::Middle, 5)?;
    lava.slip_prob = 0.1;
    let compiled = crate::grid::compile_grid(&lava)?;
    let nonterminal: Vec<bool> = compiled.mdp.terminal.iter().map(|t| !t).collect();
    let d = check_decomposability(&compiled.mdp, Some(&nonterminal));
    out.push(CheckResult::recorded(
        "decomposability/lava_crossing_m_slip",
        format!("decomposable={} classes={}", d.decomposable, d.n_classes),
    ));

    // Planted recovery on the recovery grid.
    let env = crate::env::recovery_grid(0.9, 30)?;
    let r_star = state_rewards(&env.mdp);
    let planted: Vec<f64> = if opts.inject_negated_reward {
        r_star.iter().map(|r| -r).collect()
    } else {
        r_star.iter().map(|r| r + 0.7).collect()
    };
    let rep = reward_recovery(&env.mdp, &[planted], &r_star, &env.mdp.initial, 0.9)?;
    let ok = !rep.failure && rep.residuals[0] < 1e-12 && (rep.offsets[0] - 0.7).abs() < 1e-12;
    out.push(CheckResult::new("recovery/planted_offset", ok, format!("{rep:?}")));

    // Contraction with planted offsets on random instances.
    let n_inst = if opts.n_contraction_instances == 0 { 20 } else { opts.n_contraction_instances };
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..n_inst {
        let n = rng.random_range(3..=6);
        let k = rng.random_range(1..=3);
        let gamma = 0.5 + 0.45 * rng.random::<f64>();
        let mdp = random_instance(n, 2, 2, gamma, &mut rng)?;
        let options = TabularOptions::random(n, k, 2, &mut rng);
        let r = state_rewards(&mdp);
        let g: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                let c = 0.5 * rng.random::<f64>();
                r.iter().map(|x| x + c).collect()
            })
            .collect();
        let rep = contraction_test(&mdp, &options, &g, &r, 60)?;
        worst = worst.max(rep.contraction_factor - rep.gamma);
        if !rep.passed() {
            failures += 1;
        }
    }
    out.push(CheckResult::new(
        "contraction/planted_offsets",
        failures == 0,
        format!("instances={n_inst} failures={failures} worst_factor_minus_gamma={worst:e}"),
    ));

    // Convergence inequality: exact rewards (must hold), planted offsets and
    // the myopic case (recorded).
    let mut worst_exact = f64::NEG_INFINITY;
    let mut worst_planted = f64::NEG_INFINITY;
    for _ in 0..10 {
        let n = rng.random_range(3..=6);
        let k = rng.random_range(1..=3);
        let mdp = random_instance(n, 2, 2, 0.9, &mut rng)?;
        let options = TabularOptions::random(n, k, 2, &mut rng);
        let r = state_rewards(&mdp);
        let exact: Vec<Vec<f64>> = vec![r.clone(); k];
        let q = solve_option_bellman(&mdp, &options, &exact)?;
        worst_exact = worst_exact.max(theorem2_inequality(&mdp, &options, &exact, &r, &q)?.max_violation);
        let planted: Vec<Vec<f64>> = vec![r.iter().map(|x| x + 0.3).collect(); k];
        let qp = solve_option_bellman(&mdp, &options, &planted)?;
        worst_planted = worst_planted.max(theorem2_inequality(&mdp, &options, &planted, &r, &qp)?.max_violation);
    }
    out.push(CheckResult::new(
        "theorem2/exact_rewards",
        worst_exact <= 1e-9,
        format!("max_violation={worst_exact:e}"),
    ));
    out.push(CheckResult::recorded(
        "theorem2/planted_offset_0.3",
        format!("max_violation={worst_planted}"),
    ));
    let myopic = random_instance(4, 2, 2, 0.0, &mut rng)?;
    let options = TabularOptions::random(4, 2, 2, &mut rng);
    let r = state_rewards(&myopic);
    let g = vec![r.iter().map(|x| x + 0.3).collect::<Vec<_>>(); 2];
    let rep = contraction_test(&myopic, &options, &g, &r, 1)?;
    out.push(CheckResult::new(
        "contraction/myopic_one_step",
        (rep.errors[1] - rep.max_offset).abs() < 1e-12,
        format!("{:?}", rep.errors),
    ));
    let q = solve_option_bellman(&myopic, &options, &g)?;
    let t2 = theorem2_inequality(&myopic, &options, &g, &r, &q)?;
    out.push(CheckResult::recorded("theorem2/myopic", format!("{t2:?}")));

    // Discriminator fixed point with a soft-optimal expert.
    let soft = crate::rollout::make_expert_tabular(
        &env.mdp,
        crate::rollout::ExpertKind::Soft { temperature: 1.0 },
    )?;
    let l1 = lemma1_fixed_point(&env.mdp, &soft.policy)?;
    out.push(CheckResult::new(
        "lemma1/plug_in",
        l1.max_abs_d_minus_half == 0.0 && l1.max_abs_reward == 0.0,
        format!("{l1:?}"),
    ));
    out.push(CheckResult::recorded(
        "lemma1/advantage_correlation",
        format!("{}", l1.advantage_correlation),
    ));
    let off = d_prob(0.25f64.ln(), 0.0);
    out.push(CheckResult::new("lemma1/off_fixed_point", off != 0.5, format!("D={off}")));
    Ok(out)
}

/// Summary CSV: `check,status,detail`.
pub fn summary_csv(results: &[CheckResult]) -> String {
    let mut s = String::from("check,status,detail\n");
    for r in results {
        let status = match r.status {
            CheckStatus::Pass => "pass",
            CheckStatus::Fail => "fail",
            CheckStatus::Recorded => "recorded",
        };
        s.push_str(&format!("{},{status},\"{}\"\n", r.name, r.detail.replace('"', "'")));
    }
    s
}
