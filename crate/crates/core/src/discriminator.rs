//! Per-option AIRL discriminators.
//!
//! `D_ω = exp(f) / (exp(f) + π_ω(a|s))`, evaluated as `σ(f - log π)`. In
//! state-only mode `f = g_ω(s) + γ h(s') - h(s)` with one shaping head `h`
//! shared by all options and `h(terminal) = 0`; in state-action mode
//! `f = g_ω(s, a)`.
//!
//! Losses are assembled from [`LossTerm`]s: one per sampled step plus the
//! discounted branch terms of the recursive expansion.

use crate::env::Environment;
use crate::nn::{sigmoid, softplus, Activation, Mlp};
use crate::options::OptionPolicy;
use crate::options::{discounted_option_return, ReturnTables, TabularOptions};
use crate::rng::sample_categorical;
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscMode {
    #[default]
    StateOnly,
    StateAction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Expert,
    Novice,
}

/// Probabilities are kept strictly inside (0, 1).
const D_MIN: f64 = f64::MIN_POSITIVE;
const D_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

/// `exp(f) / (exp(f) + π)` computed from `log π`.
pub fn d_prob(log_pi: f64, f: f64) -> f64 {
    sigmoid(f - log_pi).clamp(D_MIN, D_MAX)
}

/// `log D - log(1 - D)`, which equals `f - log π`.
pub fn extract_reward(log_pi: f64, f: f64) -> f64 {
    f - log_pi
}

/// Cross-entropy of one sample: `-log D` for expert samples, `-log(1 - D)`
/// for novice samples, and its derivative with respect to `f`.
pub fn cross_entropy(source: Source, log_pi: f64, f: f64) -> (f64, f64) {
    let z = f - log_pi;
    match source {
        Source::Expert => (softplus(-z), -sigmoid(-z)),
        Source::Novice => (softplus(z), sigmoid(z)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerm {
    pub s: usize,
    pub a: usize,
    pub s_next: usize,
    pub terminal_next: bool,
    pub option: usize,
    pub source: Source,
    pub weight: f64,
    pub log_pi: f64,
    /// Sampled step (as opposed to a recursive branch term).
    pub root: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expansion {
    /// Both branches expanded with weights `γβ` and `γ(1-β)`.
    Weighted,
    /// One branch chosen with probability `β`, weight `γ`.
    Sampled,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecursiveLossConfig {
    pub depth: usize,
    pub expansion: Expansion,
    /// Samples per branch; each carries `1/n` of the branch weight.
    pub continuation_samples: usize,
    pub termination_samples: usize,
}

impl Default for RecursiveLossConfig {
    fn default() -> Self {
        Self {
            depth: 1,
            expansion: Expansion::Weighted,
            continuation_samples: 1,
            termination_samples: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub mode: DiscMode,
    pub gamma: f64,
    pub n_options: usize,
    pub n_actions: usize,
    /// `g_ω`, one network per option.
    pub reward_nets: Vec<Mlp>,
    /// Shaping head `h`, used in state-only mode.
    pub shaping_net: Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscArch {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for DiscArch {
    fn default() -> Self {
        Self {
            hidden: vec![150, 150, 150],
            activation: Activation::Relu,
        }
    }
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

/// Loss, accuracy and gradient of a batch.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub loss: f64,
    pub accuracy: f64,
    pub grad: Vec<f64>,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        n_options: usize,
        n_actions: usize,
        gamma: f64,
        mode: DiscMode,
        arch: &DiscArch,
        rng: &mut R,
    ) -> Self {
        let out = match mode {
            DiscMode::StateOnly => 1,
            DiscMode::StateAction => n_actions,
        };
        let reward_nets = (0..n_options)
            .map(|_| Mlp::orthogonal(&sizes(obs_dim, &arch.hidden, out), arch.activation, 1.0, rng))
            .collect();
        let shaping_net = Mlp::orthogonal(&sizes(obs_dim, &arch.hidden, 1), arch.activation, 1.0, rng);
        Self {
            mode,
            gamma,
            n_options,
            n_actions,
            reward_nets,
            shaping_net,
        }
    }

    pub fn n_params(&self) -> usize {
        self.reward_nets.iter().map(|n| n.n_params()).sum::<usize>() + self.shaping_net.n_params()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for n in &self.reward_nets {
            out.extend_from_slice(&n.params);
        }
        out.extend_from_slice(&self.shaping_net.params);
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::Shape {
                context: "discriminator parameters",
                expected: self.n_params(),
                got: p.len(),
            });
        }
        let mut i = 0;
        for n in self.reward_nets.iter_mut().chain(std::iter::once(&mut self.shaping_net)) {
            let len = n.n_params();
            n.params.copy_from_slice(&p[i..i + len]);
            i += len;
        }
        Ok(())
    }

    /// Mutable parameter groups in `params()` order, for the optimizer.
    pub fn param_groups(&mut self) -> Vec<&mut [f64]> {
        self.reward_nets
            .iter_mut()
            .chain(std::iter::once(&mut self.shaping_net))
            .map(|n| n.params.as_mut_slice())
            .collect()
    }

    /// `g_ω(s)` (state-only) or `g_ω(s, a)` (state-action).
    pub fn g(&self, obs: &[f64], w: usize, a: usize) -> Result<f64> {
        let out = self.reward_nets[w].forward(obs)?;
        Ok(match self.mode {
            DiscMode::StateOnly => out[0],
            DiscMode::StateAction => out[a],
        })
    }

    pub fn h(&self, obs: &[f64]) -> Result<f64> {
        Ok(self.shaping_net.forward(obs)?[0])
    }

    pub fn f_value(&self, env: &Environment, s: usize, a: usize, s_next: usize, w: usize) -> Result<f64> {
        self.f_from_obs(env.obs(s), a, env.obs(s_next), env.is_terminal(s_next), w)
    }

    pub fn f_from_obs(
        &self,
        obs: &[f64],
        a: usize,
        obs_next: &[f64],
        terminal_next: bool,
        w: usize,
    ) -> Result<f64> {
        let g = self.g(obs, w, a)?;
        Ok(match self.mode {
            DiscMode::StateAction => g,
            DiscMode::StateOnly => {
                let next = if terminal_next { 0.0 } else { self.h(obs_next)? };
                g + self.gamma * next - self.h(obs)?
            }
        })
    }

    /// Weighted batch loss `Σ_E w ℓ / Z_E + Σ_N w ℓ / Z_N`, with `Z` the total
    /// root weight per source, plus its gradient over `params()`.
    pub fn batch_loss(&self, env: &Environment, terms: &[LossTerm]) -> Result<BatchLoss> {
        let mut z = [0.0f64; 2];
        for t in terms.iter().filter(|t| t.root) {
            z[t.source as usize] += t.weight;
        }
        if terms.iter().any(|t| z[t.source as usize] <= 0.0) {
            return Err(Error::Contract("loss terms without a root sample of their source".into()));
        }
        // Forward each distinct network input once.
        let mut g_cache: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
        let mut h_cache: BTreeMap<usize, f64> = BTreeMap::new();
        for t in terms {
            if let std::collections::btree_map::Entry::Vacant(e) = g_cache.entry((t.option, t.s)) {
                e.insert(self.reward_nets[t.option].forward(env.obs(t.s))?);
            }
            if self.mode == DiscMode::StateOnly {
                for st in [t.s, t.s_next] {
                    if !h_cache.contains_key(&st) && !(st == t.s_next && t.terminal_next) {
                        h_cache.insert(st, self.h(env.obs(st))?);
                    }
                }
            }
        }
        let mut loss = 0.0;
        let mut correct = 0.0;
        let mut n_roots = 0.0;
        let mut g_up: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
        let mut h_up: BTreeMap<usize, f64> = BTreeMap::new();
        for t in terms {
            let gout = &g_cache[&(t.option, t.s)];
            let g = match self.mode {
                DiscMode::StateOnly => gout[0],
                DiscMode::StateAction => gout[t.a],
            };
            let f = match self.mode {
                DiscMode::StateAction => g,
                DiscMode::StateOnly => {
                    let next = if t.terminal_next { 0.0 } else { h_cache[&t.s_next] };
                    g + self.gamma * next - h_cache[&t.s]
                }
            };
            let (l, dl) = cross_entropy(t.source, t.log_pi, f);
            if !l.is_finite() || !dl.is_finite() {
                return Err(Error::NonFinite(format!("discriminator loss at state {}", t.s)));
            }
            let c = t.weight / z[t.source as usize];
            loss += c * l;
            let df = c * dl;
            let up = g_up
                .entry((t.option, t.s))
                .or_insert_with(|| vec![0.0; gout.len()]);
            match self.mode {
                DiscMode::StateOnly => up[0] += df,
                DiscMode::StateAction => up[t.a] += df,
            }
            if self.mode == DiscMode::StateOnly {
                *h_up.entry(t.s).or_insert(0.0) -= df;
                if !t.terminal_next {
                    *h_up.entry(t.s_next).or_insert(0.0) += self.gamma * df;
                }
            }
            if t.root {
                let d = d_prob(t.log_pi, f);
                n_roots += 1.0;
                correct += match (t.source, d.partial_cmp(&0.5)) {
                    (_, Some(std::cmp::Ordering::Equal)) => 0.5,
                    (Source::Expert, Some(std::cmp::Ordering::Greater)) => 1.0,
                    (Source::Novice, Some(std::cmp::Ordering::Less)) => 1.0,
                    _ => 0.0,
                };
            }
        }
        let mut grad = vec![0.0; self.n_params()];
        let mut offsets = Vec::with_capacity(self.n_options + 1);
        let mut off = 0;
        for n in &self.reward_nets {
            offsets.push(off);
            off += n.n_params();
        }
        let h_off = off;
        for ((w, s), up) in &g_up {
            let net = &self.reward_nets[*w];
            let tape = net.forward_tape(env.obs(*s))?;
            let o = offsets[*w];
            net.backward(&tape, up, &mut grad[o..o + net.n_params()], false)?;
        }
        for (s, up) in &h_up {
            let tape = self.shaping_net.forward_tape(env.obs(*s))?;
            self.shaping_net.backward(&tape, &[*up], &mut grad[h_off..], false)?;
        }
        Ok(BatchLoss {
            loss,
            accuracy: if n_roots > 0.0 { correct / n_roots } else { 0.0 },
            grad,
        })
    }

    /// Per-option `g_ω(s)` over all states (state-only mode; in state-action
    /// mode the policy-free average over actions).
    pub fn reward_table(&self, env: &Environment) -> Result<Vec<Vec<f64>>> {
        let n = env.mdp.n_states();
        (0..self.n_options)
            .map(|w| {
                (0..n)
                    .map(|s| {
                        let out = self.reward_nets[w].forward(env.obs(s))?;
                        Ok(out.iter().sum::<f64>() / out.len() as f64)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Loss of a single term with its own normalization (weight 1, no batch).
pub fn step_loss_value(disc: &Discriminator, env: &Environment, t: &LossTerm) -> Result<f64> {
    let f = disc.f_value(env, t.s, t.a, t.s_next, t.option)?;
    Ok(cross_entropy(t.source, t.log_pi, f).0)
}

/// Appends the recursive branch terms below a sampled step. Branch actions
/// and options come from `policy`; next states from fresh environment draws.
/// Branch terms inherit the root's source label.
pub fn expand_recursive<R: Rng + ?Sized>(
    root: &LossTerm,
    policy: &dyn OptionPolicy,
    env: &Environment,
    cfg: &RecursiveLossConfig,
    rng: &mut R,
    out: &mut Vec<LossTerm>,
) -> Result<()> {
    out.push(*root);
    expand_below(root, root.weight, cfg.depth, policy, env, cfg, rng, out)
}

#[allow(clippy::too_many_arguments)]
fn expand_below<R: Rng + ?Sized>(
    parent: &LossTerm,
    weight: f64,
    depth: usize,
    policy: &dyn OptionPolicy,
    env: &Environment,
    cfg: &RecursiveLossConfig,
    rng: &mut R,
    out: &mut Vec<LossTerm>,
) -> Result<()> {
    if depth == 0 || parent.terminal_next {
        return Ok(());
    }
    let s1 = parent.s_next;
    let sp = policy.evaluate(s1, env.obs(s1));
    let beta = sp.termination[parent.option];
    let gamma = env.gamma();
    let branch = |option: usize, w: f64, out: &mut Vec<LossTerm>, rng: &mut R| -> Result<()> {
        let a = sample_categorical(&sp.actions[option], rng);
        let step = env.step(s1, a, rng)?;
        let term = LossTerm {
            s: s1,
            a,
            s_next: step.next,
            terminal_next: step.done,
            option,
            source: parent.source,
            weight: w,
            log_pi: sp.actions[option][a].ln(),
            root: false,
        };
        out.push(term);
        expand_below(&term, w, depth - 1, policy, env, cfg, rng, out)
    };
    match cfg.expansion {
        Expansion::Weighted => {
            // Termination branch: ω' ~ π_Ω(·|s'), a'₁ ~ π_ω'.
            let n1 = cfg.termination_samples.max(1);
            for _ in 0..n1 {
                let w2 = sample_categorical(&sp.master, rng);
                branch(w2, weight * gamma * beta / n1 as f64, out, rng)?;
            }
            // Continuation branch: a'₂ ~ π_ω.
            let n2 = cfg.continuation_samples.max(1);
            for _ in 0..n2 {
                branch(parent.option, weight * gamma * (1.0 - beta) / n2 as f64, out, rng)?;
            }
        }
        Expansion::Sampled => {
            let terminate = rng.random::<f64>() < beta;
            let w2 = if terminate {
                sample_categorical(&sp.master, rng)
            } else {
                parent.option
            };
            branch(w2, weight * gamma, out, rng)?;
        }
    }
    Ok(())
}

/// Recursive loss of one sampled step: the weighted sum of its expansion's
/// per-term cross-entropies, with gradient.
pub fn recursive_loss<R: Rng + ?Sized>(
    disc: &Discriminator,
    root: &LossTerm,
    policy: &dyn OptionPolicy,
    env: &Environment,
    cfg: &RecursiveLossConfig,
    rng: &mut R,
) -> Result<(f64, Vec<LossTerm>)> {
    let mut terms = Vec::new();
    expand_recursive(root, policy, env, cfg, rng, &mut terms)?;
    let mut total = 0.0;
    for t in &terms {
        total += t.weight * step_loss_value(disc, env, t)?;
    }
    Ok((total, terms))
}

/// Exact expected recursive losses `L(s,ω,a)`, `L(s,ω)`, `L_Ω(s,a)`, `L_Ω(s)`
/// for a fixed source label, with the option policy given as tables.
pub fn expected_loss_tables(
    disc: &Discriminator,
    env: &Environment,
    opts: &TabularOptions,
    source: Source,
) -> Result<ReturnTables> {
    let mdp = &env.mdp;
    let (n, k, na) = (mdp.n_states(), opts.n_options, opts.n_actions);
    let mut per_step = vec![0.0; k * n * na];
    for w in 0..k {
        for s in 0..n {
            if mdp.terminal[s] {
                continue;
            }
            for a in 0..na {
                let log_pi = opts.pi(s, w, a).ln();
                let mut l = 0.0;
                for t in mdp.row(s, a) {
                    let f = disc.f_value(env, s, a, t.next, w)?;
                    l += t.prob * cross_entropy(source, log_pi, f).0;
                }
                per_step[(w * n + s) * na + a] = l;
            }
        }
    }
    discounted_option_return(mdp, opts, &per_step)
}

/// Extracted rewards `f - log π_ω(a|s)` for every step of a batch, using the
/// log-probabilities logged at collection time.
pub fn extract_rewards(
    disc: &Discriminator,
    env: &Environment,
    trajs: &[crate::rollout::OptionTrajectory],
) -> Result<Vec<Vec<f64>>> {
    trajs
        .iter()
        .map(|tr| {
            tr.steps
                .iter()
                .map(|st| {
                    let f = disc.f_value(env, st.s, st.a, st.s_next, st.option)?;
                    Ok(extract_reward(st.log_pi_action, f))
                })
                .collect()
        })
        .collect()
}
