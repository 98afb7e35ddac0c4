//! Enumerable MDPs with sparse transition rows.
//!
//! Rewards live on transitions so that sparse terminal bonuses (which depend
//! on the landing state) are reproduced exactly by sampled rollouts. The
//! state-action reward `R(s,a)` is the expectation over the row.

use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Tolerance for row-stochasticity checks.
pub const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub next: usize,
    pub prob: f64,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    rows: Vec<Vec<Transition>>,
    pub gamma: f64,
    pub terminal: Vec<bool>,
    pub initial: Vec<f64>,
    pub r_max: f64,
    /// Grouping key per state (e.g. the grid cell of an augmented state).
    /// Density estimates are pooled over states sharing a key.
    pub state_key: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub next: usize,
    pub reward: f64,
    pub done: bool,
}

impl TabularMdp {
    /// Builds and validates an MDP from sparse rows indexed `s * n_actions + a`.
    /// Duplicate successor entries within a row are merged.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        rows: Vec<Vec<Transition>>,
        gamma: f64,
        terminal: Vec<bool>,
        initial: Vec<f64>,
        r_max: f64,
    ) -> Result<Self> {
        if rows.len() != n_states * n_actions {
            return Err(Error::Shape {
                context: "transition rows",
                expected: n_states * n_actions,
                got: rows.len(),
            });
        }
        let rows = rows.into_iter().map(merge_row).collect();
        let mdp = Self {
            n_states,
            n_actions,
            rows,
            gamma,
            terminal,
            initial,
            r_max,
            state_key: (0..n_states).collect(),
        };
        mdp.validate()?;
        Ok(mdp)
    }

    /// Builds from a dense kernel `p[(s * A + a) * S + s']` and dense
    /// state-action rewards `r[s * A + a]`.
    pub fn from_dense(
        n_states: usize,
        n_actions: usize,
        p: &[f64],
        r: &[f64],
        gamma: f64,
        terminal: Vec<bool>,
        initial: Vec<f64>,
    ) -> Result<Self> {
        if p.len() != n_states * n_actions * n_states {
            return Err(Error::Shape {
                context: "dense kernel",
                expected: n_states * n_actions * n_states,
                got: p.len(),
            });
        }
        if r.len() != n_states * n_actions {
            return Err(Error::Shape {
                context: "dense reward",
                expected: n_states * n_actions,
                got: r.len(),
            });
        }
        let mut rows = Vec::with_capacity(n_states * n_actions);
        for sa in 0..n_states * n_actions {
            let row = (0..n_states)
                .filter(|&s2| p[sa * n_states + s2] > 0.0)
                .map(|s2| Transition {
                    next: s2,
                    prob: p[sa * n_states + s2],
                    reward: r[sa],
                })
                .collect();
            rows.push(row);
        }
        let r_max = r.iter().cloned().fold(0.0, f64::max);
        Self::new(n_states, n_actions, rows, gamma, terminal, initial, r_max)
    }

    pub fn with_state_keys(mut self, keys: Vec<usize>) -> Result<Self> {
        if keys.len() != self.n_states {
            return Err(Error::Shape {
                context: "state keys",
                expected: self.n_states,
                got: keys.len(),
            });
        }
        self.state_key = keys;
        Ok(self)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_keys(&self) -> usize {
        self.state_key.iter().max().map_or(0, |k| k + 1)
    }

    pub fn row(&self, s: usize, a: usize) -> &[Transition] {
        &self.rows[s * self.n_actions + a]
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.row(s, a)
            .iter()
            .filter(|t| t.next == next)
            .map(|t| t.prob)
            .sum()
    }

    /// Expected one-step reward `R(s,a)`.
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.row(s, a).iter().map(|t| t.prob * t.reward).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidSpec(format!(
                "discount {} outside [0, 1)",
                self.gamma
            )));
        }
        if self.terminal.len() != self.n_states || self.initial.len() != self.n_states {
            return Err(Error::Shape {
                context: "terminal/initial masks",
                expected: self.n_states,
                got: self.terminal.len().min(self.initial.len()),
            });
        }
        let init_sum: f64 = self.initial.iter().sum();
        if (init_sum - 1.0).abs() > ROW_SUM_TOL || self.initial.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidSpec(format!(
                "initial distribution sums to {init_sum}"
            )));
        }
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = self.row(s, a);
                let total: f64 = row.iter().map(|t| t.prob).sum();
                if (total - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::InvalidSpec(format!(
                        "row (s={s}, a={a}) sums to {total}"
                    )));
                }
                for t in row {
                    if t.next >= self.n_states || t.prob < 0.0 {
                        return Err(Error::InvalidSpec(format!(
                            "bad transition {t:?} from (s={s}, a={a})"
                        )));
                    }
                    if t.reward < 0.0 || t.reward > self.r_max + 1e-12 {
                        return Err(Error::InvalidSpec(format!(
                            "reward {} outside [0, {}] at (s={s}, a={a})",
                            t.reward, self.r_max
                        )));
                    }
                }
                if self.terminal[s] && (self.prob(s, a, s) - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::InvalidSpec(format!(
                        "terminal state {s} is not absorbing under action {a}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Samples one transition. Stepping from a terminal state is a contract
    /// violation.
    pub fn step<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> Result<StepOutcome> {
        if s >= self.n_states || a >= self.n_actions {
            return Err(Error::Contract(format!("state {s} / action {a} out of range")));
        }
        if self.terminal[s] {
            return Err(Error::Contract(format!("step from terminal state {s}")));
        }
        let row = self.row(s, a);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = row[row.len() - 1];
        for t in row {
            acc += t.prob;
            if u < acc {
                chosen = *t;
                break;
            }
        }
        Ok(StepOutcome {
            next: chosen.next,
            reward: chosen.reward,
            done: self.terminal[chosen.next],
        })
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        crate::rng::sample_categorical(&self.initial, rng)
    }

    /// One-step lookahead `R(s,a) + γ Σ P(s'|s,a) V(s')`.
    pub fn backup(&self, s: usize, a: usize, values: &[f64]) -> f64 {
        self.row(s, a)
            .iter()
            .map(|t| t.prob * (t.reward + self.gamma * values[t.next]))
            .sum()
    }

    /// Optimal action values by value iteration until the sup-norm residual
    /// drops below `tol`.
    pub fn value_iteration(&self, tol: f64, max_iters: usize) -> Result<ActionValues> {
        let mut v = vec![0.0; self.n_states];
        let mut q = vec![0.0; self.n_states * self.n_actions];
        for it in 0..max_iters {
            let mut residual: f64 = 0.0;
            for s in 0..self.n_states {
                let mut best = f64::NEG_INFINITY;
                for a in 0..self.n_actions {
                    let qa = self.backup(s, a, &v);
                    q[s * self.n_actions + a] = qa;
                    best = best.max(qa);
                }
                residual = residual.max((best - v[s]).abs());
                v[s] = best;
            }
            if residual < tol {
                return Ok(ActionValues {
                    n_actions: self.n_actions,
                    q,
                    v,
                    iterations: it + 1,
                });
            }
        }
        Err(Error::NoConvergence {
            iterations: max_iters,
            residual: self.bellman_residual(&v),
        })
    }

    /// Entropy-regularized (soft) value iteration: `V(s) = τ log Σ_a exp(Q(s,a)/τ)`.
    pub fn soft_value_iteration(
        &self,
        temperature: f64,
        tol: f64,
        max_iters: usize,
    ) -> Result<ActionValues> {
        let mut v = vec![0.0; self.n_states];
        let mut q = vec![0.0; self.n_states * self.n_actions];
        for it in 0..max_iters {
            let mut residual: f64 = 0.0;
            for s in 0..self.n_states {
                let new_v = if self.terminal[s] {
                    for a in 0..self.n_actions {
                        q[s * self.n_actions + a] = 0.0;
                    }
                    0.0
                } else {
                    for a in 0..self.n_actions {
                        q[s * self.n_actions + a] = self.backup(s, a, &v);
                    }
                    let qs = &q[s * self.n_actions..(s + 1) * self.n_actions];
                    temperature * log_sum_exp(qs.iter().map(|x| x / temperature))
                };
                residual = residual.max((new_v - v[s]).abs());
                v[s] = new_v;
            }
            if residual < tol {
                return Ok(ActionValues {
                    n_actions: self.n_actions,
                    q,
                    v,
                    iterations: it + 1,
                });
            }
        }
        Err(Error::NoConvergence {
            iterations: max_iters,
            residual: f64::NAN,
        })
    }

    /// Sup-norm residual of the Bellman optimality operator at `v`.
    pub fn bellman_residual(&self, v: &[f64]) -> f64 {
        (0..self.n_states)
            .map(|s| {
                let best = (0..self.n_actions)
                    .map(|a| self.backup(s, a, v))
                    .fold(f64::NEG_INFINITY, f64::max);
                (best - v[s]).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Stationary-free state occupancy of a Markov chain driven by per-state
    /// action probabilities, started from the initial distribution and
    /// propagated `steps` times. Returns the average occupancy over steps.
    pub fn occupancy(&self, policy: &dyn Fn(usize) -> Vec<f64>, steps: usize) -> Vec<f64> {
        let mut dist = self.initial.clone();
        let mut acc = vec![0.0; self.n_states];
        let probs: Vec<Vec<f64>> = (0..self.n_states).map(policy).collect();
        for _ in 0..steps {
            for (a, d) in acc.iter_mut().zip(&dist) {
                *a += d;
            }
            let mut next = vec![0.0; self.n_states];
            for s in 0..self.n_states {
                if dist[s] == 0.0 {
                    continue;
                }
                for (a, &pa) in probs[s].iter().enumerate() {
                    if pa == 0.0 {
                        continue;
                    }
                    for t in self.row(s, a) {
                        next[t.next] += dist[s] * pa * t.prob;
                    }
                }
            }
            dist = next;
        }
        let total: f64 = acc.iter().sum();
        acc.iter().map(|x| x / total).collect()
    }

    /// Content hash over the kernel, rewards and masks.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n_states as u64).to_le_bytes());
        h.update((self.n_actions as u64).to_le_bytes());
        h.update(self.gamma.to_le_bytes());
        for row in &self.rows {
            h.update((row.len() as u64).to_le_bytes());
            for t in row {
                h.update((t.next as u64).to_le_bytes());
                h.update(t.prob.to_le_bytes());
                h.update(t.reward.to_le_bytes());
            }
        }
        for &t in &self.terminal {
            h.update([t as u8]);
        }
        for p in &self.initial {
            h.update(p.to_le_bytes());
        }
        hex::encode(h.finalize())[..16].to_string()
    }

    pub fn dump(&self) -> MdpDump {
        let mut transitions = Vec::new();
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                for t in self.row(s, a) {
                    transitions.push(DumpedTransition {
                        s,
                        a,
                        next: t.next,
                        prob: t.prob,
                        reward: t.reward,
                    });
                }
            }
        }
        MdpDump {
            n_states: self.n_states,
            n_actions: self.n_actions,
            gamma: self.gamma,
            r_max: self.r_max,
            terminal: self.terminal.clone(),
            initial: self.initial.clone(),
            transitions,
        }
    }
}

fn merge_row(mut row: Vec<Transition>) -> Vec<Transition> {
    row.sort_by_key(|t| t.next);
    let mut out: Vec<Transition> = Vec::with_capacity(row.len());
    for t in row {
        if t.prob == 0.0 {
            continue;
        }
        match out.last_mut() {
            Some(last) if last.next == t.next => {
                // Probability-weighted reward keeps R(s,a) unchanged.
                let p = last.prob + t.prob;
                last.reward = (last.reward * last.prob + t.reward * t.prob) / p;
                last.prob = p;
            }
            _ => out.push(t),
        }
    }
    out
}

pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Action values with their greedy state values.
#[derive(Clone, Debug)]
pub struct ActionValues {
    pub n_actions: usize,
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub iterations: usize,
}

impl ActionValues {
    pub fn q(&self, s: usize, a: usize) -> f64 {
        self.q[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.q[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// Greedy action with lowest-index tie-breaking.
    pub fn greedy(&self, s: usize) -> usize {
        crate::rng::argmax(self.row(s))
    }
}

/// Diagnostic export of a compiled MDP.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MdpDump {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub r_max: f64,
    pub terminal: Vec<bool>,
    pub initial: Vec<f64>,
    pub transitions: Vec<DumpedTransition>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DumpedTransition {
    pub s: usize,
    pub a: usize,
    pub next: usize,
    pub prob: f64,
    pub reward: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn two_state_chain() -> TabularMdp {
        // state 0 --a1--> 1 (terminal, reward 1); a0 stays.
        let p = [1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let r = [0.0, 1.0, 0.0, 0.0];
        TabularMdp::from_dense(2, 2, &p, &r, 0.9, vec![false, true], vec![1.0, 0.0]).unwrap()
    }

    #[test]
    fn rejects_non_stochastic_rows() {
        let rows = vec![vec![Transition {
            next: 0,
            prob: 0.5,
            reward: 0.0,
        }]];
        assert!(TabularMdp::new(1, 1, rows, 0.9, vec![false], vec![1.0], 1.0).is_err());
    }

    #[test]
    fn rejects_leaky_terminal() {
        let p = [0.0, 1.0, 0.0, 1.0];
        let r = [0.0, 0.0];
        let err = TabularMdp::from_dense(2, 1, &p, &r, 0.9, vec![true, false], vec![0.0, 1.0]);
        assert!(err.is_err());
    }

    #[test]
    fn stepping_from_terminal_is_an_error() {
        let mdp = two_state_chain();
        let mut rng = stream(0, 0);
        assert!(matches!(mdp.step(1, 0, &mut rng), Err(Error::Contract(_))));
    }

    #[test]
    fn greedy_action_points_along_chain() {
        let mdp = two_state_chain();
        let q = mdp.value_iteration(1e-12, 10_000).unwrap();
        assert_eq!(q.greedy(0), 1);
        assert!(mdp.bellman_residual(&q.v) < 1e-9);
    }

    #[test]
    fn merged_duplicates_keep_expected_reward() {
        let rows = vec![vec![
            Transition {
                next: 0,
                prob: 0.25,
                reward: 1.0,
            },
            Transition {
                next: 0,
                prob: 0.75,
                reward: 0.0,
            },
        ]];
        let mdp = TabularMdp::new(1, 1, rows, 0.5, vec![false], vec![1.0], 1.0).unwrap();
        assert_eq!(mdp.row(0, 0).len(), 1);
        assert!((mdp.reward(0, 0) - 0.25).abs() < 1e-15);
    }
}
