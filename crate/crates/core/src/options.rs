//! Options runtime: policies over options, option kernels and the recursive
//! option returns.
//!
//! Index conventions: option-state pairs are flattened as `s * K + ω` and
//! option-state-action triples as `(s * K + ω) * A + a`, with `K` options and
//! `A` actions. Per-step reward tables supplied by callers are indexed
//! `(ω * S + s) * A + a`.

use crate::mdp::TabularMdp;
use crate::rng::{argmax, sample_categorical};
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Everything a learner needs to act in one state.
#[derive(Clone, Debug, PartialEq)]
pub struct StatePolicy {
    /// `π_Ω(ω|s)`.
    pub master: Vec<f64>,
    /// `π_ω(a|s)` indexed `[ω][a]`.
    pub actions: Vec<Vec<f64>>,
    /// `β_ω(s)`.
    pub termination: Vec<f64>,
}

impl StatePolicy {
    pub fn n_options(&self) -> usize {
        self.master.len()
    }

    /// Composite action distribution `π_Θ(a|s) = Σ_ω π_Ω(ω|s) π_ω(a|s)`.
    pub fn composite(&self) -> Vec<f64> {
        let n_actions = self.actions[0].len();
        let mut out = vec![0.0; n_actions];
        for (m, probs) in self.master.iter().zip(&self.actions) {
            for (o, p) in out.iter_mut().zip(probs) {
                *o += m * p;
            }
        }
        out
    }

    /// `P(ω'|s, previous ω)` upon arriving in this state with option `omega`
    /// active: continue with probability `1 - β_ω(s)`, otherwise reselect.
    pub fn switch_probs(&self, omega: usize) -> Vec<f64> {
        let b = self.termination[omega];
        let mut out: Vec<f64> = self.master.iter().map(|m| b * m).collect();
        out[omega] += 1.0 - b;
        out
    }
}

/// Anything that can produce a [`StatePolicy`] for a state. Tabular policies
/// use the state index, approximators use the observation.
pub trait OptionPolicy: Send + Sync {
    fn n_options(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn evaluate(&self, s: usize, obs: &[f64]) -> StatePolicy;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    #[default]
    Stochastic,
    Greedy,
}

/// Outcome of one composite action selection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decision {
    pub action: usize,
    pub option: usize,
    /// The previously active option terminated in this state.
    pub terminated: bool,
    /// An option was (re)selected by the master policy in this state.
    pub selected: bool,
    pub log_pi_master: f64,
    pub log_pi_action: f64,
    /// `β` of the previously active option, 0 when none was active.
    pub beta: f64,
}

/// Selects an option (continuing or reselecting) and an action. Random draws
/// happen in a fixed order: termination (only if an option is active),
/// master (only if reselecting), action.
pub fn composite_action<R: Rng + ?Sized>(
    sp: &StatePolicy,
    current: Option<usize>,
    mode: ActMode,
    rng: &mut R,
) -> Decision {
    let (terminated, beta) = match current {
        None => (false, 0.0),
        Some(w) => {
            let b = sp.termination[w];
            let fired = match mode {
                ActMode::Stochastic => rng.random::<f64>() < b,
                ActMode::Greedy => b > 0.5,
            };
            (fired, b)
        }
    };
    let selected = current.is_none() || terminated;
    let option = if selected {
        match mode {
            ActMode::Stochastic => sample_categorical(&sp.master, rng),
            ActMode::Greedy => argmax(&sp.master),
        }
    } else {
        current.unwrap_or(0)
    };
    let probs = &sp.actions[option];
    let action = match mode {
        ActMode::Stochastic => sample_categorical(probs, rng),
        ActMode::Greedy => argmax(probs),
    };
    Decision {
        action,
        option,
        terminated,
        selected,
        log_pi_master: sp.master[option].ln(),
        log_pi_action: probs[action].ln(),
        beta,
    }
}

/// Explicit per-state option tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularOptions {
    pub n_states: usize,
    pub n_options: usize,
    pub n_actions: usize,
    /// `π_Ω(ω|s)` at `s * K + ω`, before initiation masking.
    pub master: Vec<f64>,
    /// `π_ω(a|s)` at `(s * K + ω) * A + a`.
    pub actions: Vec<f64>,
    /// `β_ω(s)` at `s * K + ω`.
    pub termination: Vec<f64>,
    /// `I_ω` membership at `s * K + ω`; all true unless restricted.
    pub initiation: Vec<bool>,
}

impl TabularOptions {
    pub fn uniform(n_states: usize, n_options: usize, n_actions: usize, beta: f64) -> Self {
        let sk = n_states * n_options;
        Self {
            n_states,
            n_options,
            n_actions,
            master: vec![1.0 / n_options as f64; sk],
            actions: vec![1.0 / n_actions as f64; sk * n_actions],
            termination: vec![beta; sk],
            initiation: vec![true; sk],
        }
    }

    /// Random full-support tables (for oracle tests).
    pub fn random<R: Rng + ?Sized>(
        n_states: usize,
        n_options: usize,
        n_actions: usize,
        rng: &mut R,
    ) -> Self {
        let mut simplex = |n: usize| -> Vec<f64> {
            let raw: Vec<f64> = (0..n).map(|_| 0.05 + rng.random::<f64>()).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / total).collect()
        };
        let mut master = Vec::new();
        let mut actions = Vec::new();
        for _ in 0..n_states {
            master.extend(simplex(n_options));
            for _ in 0..n_options {
                actions.extend(simplex(n_actions));
            }
        }
        let termination = (0..n_states * n_options).map(|_| rng.random::<f64>()).collect();
        Self {
            n_states,
            n_options,
            n_actions,
            master,
            actions,
            termination,
            initiation: vec![true; n_states * n_options],
        }
    }

    /// Freezes any policy into tables over the given observation rows.
    pub fn snapshot(policy: &dyn OptionPolicy, obs: &crate::env::FeatureTable) -> Self {
        let n_states = obs.n_rows();
        let (k, a) = (policy.n_options(), policy.n_actions());
        let mut out = Self::uniform(n_states, k, a, 0.0);
        for s in 0..n_states {
            let sp = policy.evaluate(s, obs.row(s));
            out.master[s * k..(s + 1) * k].copy_from_slice(&sp.master);
            out.termination[s * k..(s + 1) * k].copy_from_slice(&sp.termination);
            for w in 0..k {
                let i = (s * k + w) * a;
                out.actions[i..i + a].copy_from_slice(&sp.actions[w]);
            }
        }
        out
    }

    /// Single option following the given per-state action distribution.
    pub fn from_flat_policy(n_actions: usize, probs: &[f64]) -> Self {
        let n_states = probs.len() / n_actions;
        let mut out = Self::uniform(n_states, 1, n_actions, 0.0);
        out.actions.copy_from_slice(probs);
        out
    }

    pub fn with_initiation(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.n_states * self.n_options {
            return Err(Error::Shape {
                context: "initiation mask",
                expected: self.n_states * self.n_options,
                got: mask.len(),
            });
        }
        for s in 0..self.n_states {
            if !mask[s * self.n_options..(s + 1) * self.n_options].iter().any(|&m| m) {
                return Err(Error::InvalidSpec(format!("no option may start in state {s}")));
            }
        }
        self.initiation = mask;
        Ok(self)
    }

    pub fn pi(&self, s: usize, w: usize, a: usize) -> f64 {
        self.actions[(s * self.n_options + w) * self.n_actions + a]
    }

    pub fn beta(&self, s: usize, w: usize) -> f64 {
        self.termination[s * self.n_options + w]
    }

    /// Master distribution with initiation masking applied.
    pub fn master_probs(&self, s: usize) -> Vec<f64> {
        let k = self.n_options;
        let raw = &self.master[s * k..(s + 1) * k];
        let mask = &self.initiation[s * k..(s + 1) * k];
        let masked: Vec<f64> = raw.iter().zip(mask).map(|(&p, &m)| if m { p } else { 0.0 }).collect();
        let total: f64 = masked.iter().sum();
        if total > 0.0 {
            masked.iter().map(|p| p / total).collect()
        } else {
            let n = mask.iter().filter(|&&m| m).count() as f64;
            mask.iter().map(|&m| if m { 1.0 / n } else { 0.0 }).collect()
        }
    }

    pub fn state_policy(&self, s: usize) -> StatePolicy {
        let k = self.n_options;
        let a = self.n_actions;
        StatePolicy {
            master: self.master_probs(s),
            actions: (0..k)
                .map(|w| self.actions[(s * k + w) * a..(s * k + w + 1) * a].to_vec())
                .collect(),
            termination: self.termination[s * k..(s + 1) * k].to_vec(),
        }
    }
}

impl OptionPolicy for TabularOptions {
    fn n_options(&self) -> usize {
        self.n_options
    }

    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn evaluate(&self, s: usize, _obs: &[f64]) -> StatePolicy {
        self.state_policy(s)
    }
}

fn check_compat(mdp: &TabularMdp, opts: &TabularOptions) -> Result<()> {
    if mdp.n_states() != opts.n_states || mdp.n_actions() != opts.n_actions {
        return Err(Error::Shape {
            context: "options vs mdp",
            expected: mdp.n_states() * mdp.n_actions(),
            got: opts.n_states * opts.n_actions,
        });
    }
    Ok(())
}

/// `P(s', ω' | s, ω, a)` as a dense vector indexed `s' * K + ω'`.
pub fn option_kernel_given_action(
    mdp: &TabularMdp,
    opts: &TabularOptions,
    s: usize,
    w: usize,
    a: usize,
) -> Vec<f64> {
    let k = opts.n_options;
    let mut out = vec![0.0; mdp.n_states() * k];
    for t in mdp.row(s, a) {
        let switch = opts.state_policy(t.next).switch_probs(w);
        for (w2, p) in switch.into_iter().enumerate() {
            out[t.next * k + w2] += t.prob * p;
        }
    }
    out
}

/// `P(s', ω' | s, ω)`.
pub fn option_kernel(mdp: &TabularMdp, opts: &TabularOptions, s: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; mdp.n_states() * opts.n_options];
    for a in 0..opts.n_actions {
        let pa = opts.pi(s, w, a);
        if pa == 0.0 {
            continue;
        }
        for (o, p) in out.iter_mut().zip(option_kernel_given_action(mdp, opts, s, w, a)) {
            *o += pa * p;
        }
    }
    out
}

/// `P(s', ω' | s)` with the current option drawn from `π_Ω(·|s)`.
pub fn option_kernel_given_state(mdp: &TabularMdp, opts: &TabularOptions, s: usize) -> Vec<f64> {
    let master = opts.master_probs(s);
    let mut out = vec![0.0; mdp.n_states() * opts.n_options];
    for (w, &m) in master.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for (o, p) in out.iter_mut().zip(option_kernel(mdp, opts, s, w)) {
            *o += m * p;
        }
    }
    out
}

/// The four members of the recursive return family.
#[derive(Clone, Debug)]
pub struct ReturnTables {
    pub n_states: usize,
    pub n_options: usize,
    pub n_actions: usize,
    /// `R(s, ω, a)` at `(s * K + ω) * A + a`.
    pub by_option_action: Vec<f64>,
    /// `R(s, ω)` at `s * K + ω`.
    pub by_option: Vec<f64>,
    /// `R_Ω(s, a)` at `s * A + a`.
    pub by_action: Vec<f64>,
    /// `R_Ω(s)`.
    pub by_state: Vec<f64>,
    pub iterations: usize,
}

impl ReturnTables {
    pub fn sw(&self, s: usize, w: usize) -> f64 {
        self.by_option[s * self.n_options + w]
    }

    pub fn swa(&self, s: usize, w: usize, a: usize) -> f64 {
        self.by_option_action[(s * self.n_options + w) * self.n_actions + a]
    }
}

pub const SOLVE_TOL: f64 = 1e-13;
pub const SOLVE_MAX_ITERS: usize = 200_000;

/// Solves `R(s,ω,a) = r̂_ω(s,a) + γ Σ_{s'} P(s'|s,a)[β_ω(s') R_Ω(s') + (1-β_ω(s')) R(s',ω)]`
/// by fixed-point iteration. Terminal states carry no return: both their own
/// entries and their continuation values are zero. `per_step` is indexed
/// `(ω * S + s) * A + a`.
pub fn discounted_option_return(
    mdp: &TabularMdp,
    opts: &TabularOptions,
    per_step: &[f64],
) -> Result<ReturnTables> {
    check_compat(mdp, opts)?;
    let (n, k, na) = (mdp.n_states(), opts.n_options, opts.n_actions);
    if per_step.len() != k * n * na {
        return Err(Error::Shape {
            context: "per-step option table",
            expected: k * n * na,
            got: per_step.len(),
        });
    }
    let masters: Vec<Vec<f64>> = (0..n).map(|s| opts.master_probs(s)).collect();
    let mut r_sw = vec![0.0; n * k];
    let mut r_s = vec![0.0; n];
    let mut r_swa = vec![0.0; n * k * na];
    let gamma = mdp.gamma;
    for it in 0..SOLVE_MAX_ITERS {
        let mut delta: f64 = 0.0;
        let mut scale: f64 = 1.0;
        for s in 0..n {
            if mdp.terminal[s] {
                continue;
            }
            for w in 0..k {
                for a in 0..na {
                    let mut cont = 0.0;
                    for t in mdp.row(s, a) {
                        if mdp.terminal[t.next] {
                            continue;
                        }
                        let b = opts.beta(t.next, w);
                        cont += t.prob * (b * r_s[t.next] + (1.0 - b) * r_sw[t.next * k + w]);
                    }
                    r_swa[(s * k + w) * na + a] = per_step[(w * n + s) * na + a] + gamma * cont;
                }
            }
        }
        for s in 0..n {
            let mut v = 0.0;
            for w in 0..k {
                let q: f64 = (0..na)
                    .map(|a| opts.pi(s, w, a) * r_swa[(s * k + w) * na + a])
                    .sum();
                delta = delta.max((q - r_sw[s * k + w]).abs());
                scale = scale.max(q.abs());
                r_sw[s * k + w] = q;
                v += masters[s][w] * q;
            }
            r_s[s] = v;
        }
        if delta <= SOLVE_TOL * scale {
            let mut r_sa = vec![0.0; n * na];
            for s in 0..n {
                for a in 0..na {
                    r_sa[s * na + a] = (0..k)
                        .map(|w| masters[s][w] * r_swa[(s * k + w) * na + a])
                        .sum();
                }
            }
            return Ok(ReturnTables {
                n_states: n,
                n_options: k,
                n_actions: na,
                by_option_action: r_swa,
                by_option: r_sw,
                by_action: r_sa,
                by_state: r_s,
                iterations: it + 1,
            });
        }
        if !delta.is_finite() {
            break;
        }
    }
    Err(Error::NoConvergence {
        iterations: SOLVE_MAX_ITERS,
        residual: f64::NAN,
    })
}

/// Option values `Q(s,ω)`, `V_Ω(s)` and advantages `A(s,a,ω) = Q(s,a,ω) - V_Ω(s)`.
#[derive(Clone, Debug)]
pub struct OptionValues {
    pub returns: ReturnTables,
}

impl OptionValues {
    pub fn q(&self, s: usize, w: usize) -> f64 {
        self.returns.sw(s, w)
    }

    pub fn v(&self, s: usize) -> f64 {
        self.returns.by_state[s]
    }

    pub fn q_action(&self, s: usize, a: usize, w: usize) -> f64 {
        self.returns.swa(s, w, a)
    }

    pub fn advantage(&self, s: usize, a: usize, w: usize) -> f64 {
        self.q_action(s, a, w) - self.v(s)
    }
}

pub fn option_values(mdp: &TabularMdp, opts: &TabularOptions, per_step: &[f64]) -> Result<OptionValues> {
    Ok(OptionValues {
        returns: discounted_option_return(mdp, opts, per_step)?,
    })
}

/// Broadcasts the MDP's own reward `R(s,a)` to every option.
pub fn env_reward_table(mdp: &TabularMdp, n_options: usize) -> Vec<f64> {
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    let mut out = Vec::with_capacity(n_options * n * na);
    for _ in 0..n_options {
        for s in 0..n {
            for a in 0..na {
                out.push(mdp.reward(s, a));
            }
        }
    }
    out
}
