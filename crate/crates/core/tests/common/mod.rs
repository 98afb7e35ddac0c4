//! Shared helpers for the integration tests: random small instances, a
//! central-difference gradient checker, Monte-Carlo rollouts of the option
//! chain, and the measurement routines reused by the acceptance suite.
#![allow(dead_code)]

use oirl::discriminator::{
    cross_entropy, d_prob, expand_recursive, expected_loss_tables, extract_reward, DiscArch, DiscMode,
    Discriminator, Expansion, LossTerm, RecursiveLossConfig, Source,
};
use oirl::env::{Environment, FeatureTable};
use oirl::mdp::{TabularMdp, Transition};
use oirl::nn::{softmax, Activation};
use oirl::options::{
    discounted_option_return, option_kernel, option_kernel_given_action, option_kernel_given_state,
    TabularOptions,
};
use oirl::ppoc::{intra_loss, master_loss, termination_loss, value_loss, OptionNets, PolicyArch, PpoSample, PpocConfig};
use oirl::rng::{sample_categorical, stream, Stream};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Random MDP with 2-3 successors per row, rewards in [0, 1] and, when
/// `with_terminal`, an absorbing terminal last state.
pub fn random_mdp<R: Rng>(rng: &mut R, n: usize, na: usize, gamma: f64, with_terminal: bool) -> TabularMdp {
    let terminal: Vec<bool> = (0..n).map(|s| with_terminal && s == n - 1).collect();
    let mut rows = Vec::new();
    for s in 0..n {
        for _ in 0..na {
            if terminal[s] {
                rows.push(vec![Transition {
                    next: s,
                    prob: 1.0,
                    reward: 0.0,
                }]);
                continue;
            }
            let k = rng.random_range(2..=3);
            let raw: Vec<(usize, f64)> = (0..k).map(|_| (rng.random_range(0..n), 0.1 + rng.random::<f64>())).collect();
            let total: f64 = raw.iter().map(|x| x.1).sum();
            rows.push(
                raw.into_iter()
                    .map(|(next, p)| Transition {
                        next,
                        prob: p / total,
                        reward: rng.random::<f64>(),
                    })
                    .collect(),
            );
        }
    }
    let live = terminal.iter().filter(|t| !**t).count() as f64;
    let initial = terminal.iter().map(|&t| if t { 0.0 } else { 1.0 / live }).collect();
    TabularMdp::new(n, na, rows, gamma, terminal, initial, 1.0).expect("valid random MDP")
}

pub fn one_hot_env(mdp: TabularMdp) -> Environment {
    let n = mdp.n_states();
    Environment::new("random", mdp, FeatureTable::one_hot(n), 200).expect("valid env")
}

/// Central differences of `loss` at `x` against `grad` on up to `n_coords`
/// coordinates with nonzero analytic gradient plus a few arbitrary ones.
/// Returns the largest relative error and the number of coordinates checked.
pub fn fd_check(
    x: &[f64],
    grad: &[f64],
    n_coords: usize,
    rng: &mut Stream,
    loss: &mut dyn FnMut(&[f64]) -> f64,
) -> (f64, usize) {
    let nonzero: Vec<usize> = (0..x.len()).filter(|&i| grad[i].abs() > 1e-7).collect();
    let mut coords: Vec<usize> = nonzero.choose_multiple(rng, n_coords).cloned().collect();
    for _ in 0..10 {
        coords.push(rng.random_range(0..x.len()));
    }
    let mut worst: f64 = 0.0;
    let mut p = x.to_vec();
    for &i in &coords {
        let h = 1e-5 * (1.0 + x[i].abs());
        p[i] = x[i] + h;
        let up = loss(&p);
        p[i] = x[i] - h;
        let down = loss(&p);
        p[i] = x[i];
        let fd = (up - down) / (2.0 * h);
        let denom = fd.abs().max(grad[i].abs()).max(1e-6);
        worst = worst.max((fd - grad[i]).abs() / denom);
    }
    (worst, coords.len())
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub coords: usize,
}

fn random_terms(rng: &mut Stream, env: &Environment, k: usize, n: usize) -> Vec<LossTerm> {
    let mdp = &env.mdp;
    let live: Vec<usize> = (0..mdp.n_states()).filter(|&s| !mdp.terminal[s]).collect();
    (0..n)
        .map(|i| {
            let s = *live.choose(rng).unwrap();
            let a = rng.random_range(0..mdp.n_actions());
            let out = mdp.step(s, a, rng).unwrap();
            LossTerm {
                s,
                a,
                s_next: out.next,
                terminal_next: mdp.terminal[out.next],
                option: rng.random_range(0..k),
                source: if i % 2 == 0 { Source::Expert } else { Source::Novice },
                weight: 0.1 + 2.0 * rng.random::<f64>(),
                log_pi: (0.05 + 0.95 * rng.random::<f64>()).ln(),
                root: true,
            }
        })
        .collect()
}

fn disc_check(
    name: &'static str,
    disc: &mut Discriminator,
    env: &Environment,
    terms: &[LossTerm],
    rng: &mut Stream,
) -> GradCheck {
    let x = disc.params();
    let grad = disc.batch_loss(env, terms).unwrap().grad;
    let mut work = disc.clone();
    let (err, n) = fd_check(&x, &grad, 120, rng, &mut |p| {
        work.set_params(p).unwrap();
        work.batch_loss(env, terms).unwrap().loss
    });
    GradCheck {
        name,
        max_rel_error: err,
        coords: n,
    }
}

fn ppo_samples(rng: &mut Stream, nets: &OptionNets, features: &FeatureTable, n_states: usize, n: usize) -> Vec<PpoSample> {
    let na = nets.n_actions;
    (0..n)
        .map(|_| {
            let s = rng.random_range(0..n_states);
            let w = rng.random_range(0..nets.n_options);
            let a = rng.random_range(0..na);
            let logits = nets.intra.forward(features.row(s)).unwrap();
            let lp = softmax(&logits[w * na..(w + 1) * na])[a].ln();
            let mp = softmax(&nets.master.forward(features.row(s)).unwrap())[w].ln();
            let noise = |rng: &mut Stream| 0.25 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
            PpoSample {
                s,
                a,
                option: w,
                s_next: rng.random_range(0..n_states),
                selected: rng.random::<bool>(),
                old_log_pi: lp + noise(rng),
                old_log_master: mp + noise(rng),
                adv: noise(rng) * 4.0,
                ret: rng.random::<f64>() * 2.0,
                term_adv: if rng.random::<f64>() < 0.8 { Some(noise(rng) * 4.0) } else { None },
                master_adv: noise(rng) * 4.0,
            }
        })
        .collect()
}

/// Gradient checks for every assembled loss.
pub fn gradient_checks(seed: u64) -> Vec<GradCheck> {
    let mut rng = stream(seed, 77);
    let mdp = random_mdp(&mut rng, 6, 3, 0.9, true);
    let env = one_hot_env(mdp);
    let k = 3;
    let mut out = Vec::new();

    for (name, mode) in [
        ("step_loss/state_only", DiscMode::StateOnly),
        ("step_loss/state_action", DiscMode::StateAction),
    ] {
        let mut disc = Discriminator::new(env.obs_dim(), k, 3, 0.9, mode, &DiscArch::default(), &mut rng);
        let terms = random_terms(&mut rng, &env, k, 24);
        out.push(disc_check(name, &mut disc, &env, &terms, &mut rng));
    }

    let policy = TabularOptions::random(env.mdp.n_states(), k, 3, &mut rng);
    for (name, expansion) in [
        ("recursive_loss/weighted", Expansion::Weighted),
        ("recursive_loss/sampled", Expansion::Sampled),
    ] {
        let mut disc = Discriminator::new(env.obs_dim(), k, 3, 0.9, DiscMode::StateOnly, &DiscArch::default(), &mut rng);
        let cfg = RecursiveLossConfig {
            depth: 1,
            expansion,
            continuation_samples: 2,
            termination_samples: 2,
        };
        let mut terms = Vec::new();
        for root in random_terms(&mut rng, &env, k, 12) {
            expand_recursive(&root, &policy, &env, &cfg, &mut rng, &mut terms).unwrap();
        }
        assert!(terms.iter().any(|t| !t.root), "expansion produced branch terms");
        out.push(disc_check(name, &mut disc, &env, &terms, &mut rng));
    }

    let features = env.features.clone();
    let arch = PolicyArch::default();
    let nets = OptionNets::new(env.obs_dim(), k, 3, &arch, &mut rng);
    // Larger logits than the initialization so ratios and clipping are exercised.
    let mut nets = nets;
    nets.intra.params.iter_mut().for_each(|p| *p *= 30.0);
    nets.master.params.iter_mut().for_each(|p| *p *= 30.0);
    nets.termination.params.iter_mut().for_each(|p| *p *= 30.0);
    let cfg = PpocConfig::default();
    let batch = ppo_samples(&mut rng, &nets, &features, env.mdp.n_states(), 64);

    type Select = fn(&mut OptionNets) -> &mut Vec<f64>;
    let checks: [(&'static str, Select); 4] = [
        ("ppo_surrogate", |n| &mut n.intra.params),
        ("termination_loss", |n| &mut n.termination.params),
        ("master_loss", |n| &mut n.master.params),
        ("value_loss", |n| &mut n.critic.params),
    ];
    for (name, select) in checks {
        let eval = |n: &OptionNets| -> (f64, Vec<f64>) {
            let l = match name {
                "ppo_surrogate" => intra_loss(n, &features, &batch, &cfg).unwrap().0,
                "termination_loss" => termination_loss(n, &features, &batch, &cfg).unwrap(),
                "master_loss" => master_loss(n, &features, &batch, &cfg).unwrap(),
                _ => value_loss(n, &features, &batch, &cfg).unwrap(),
            };
            (l.loss, l.grad)
        };
        let mut work = nets.clone();
        let x = select(&mut work).clone();
        let (_, grad) = eval(&nets);
        let (err, n) = fd_check(&x, &grad, 120, &mut rng, &mut |p| {
            select(&mut work).copy_from_slice(p);
            eval(&work).0
        });
        out.push(GradCheck {
            name,
            max_rel_error: err,
            coords: n,
        });
    }
    out
}

#[derive(Debug, Clone)]
pub struct Identity {
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
}

impl Identity {
    pub fn ok(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

fn bump(slot: &mut f64, v: f64) {
    if !(v <= *slot) {
        *slot = v;
    }
}

/// Kernel, return-family and discriminator identities on one random instance.
pub fn identity_errors(mdp: &TabularMdp, opts: &TabularOptions, per_step: &[f64]) -> Vec<Identity> {
    let (n, k, na) = (mdp.n_states(), opts.n_options, opts.n_actions);
    let mut norm: f64 = 0.0;
    let mut consistency: f64 = 0.0;
    for s in 0..n {
        let by_state = option_kernel_given_state(mdp, opts, s);
        bump(&mut norm, (by_state.iter().sum::<f64>() - 1.0).abs());
        let master = opts.master_probs(s);
        let mut mixed = vec![0.0; n * k];
        for w in 0..k {
            let kern = option_kernel(mdp, opts, s, w);
            bump(&mut norm, (kern.iter().sum::<f64>() - 1.0).abs());
            let mut via_actions = vec![0.0; n * k];
            for a in 0..na {
                let ga = option_kernel_given_action(mdp, opts, s, w, a);
                bump(&mut norm, (ga.iter().sum::<f64>() - 1.0).abs());
                // Marginalizing ω' recovers the environment kernel.
                for s2 in 0..n {
                    let m: f64 = (0..k).map(|w2| ga[s2 * k + w2]).sum();
                    bump(&mut consistency, (m - mdp.prob(s, a, s2)).abs());
                }
                for (v, g) in via_actions.iter_mut().zip(&ga) {
                    *v += opts.pi(s, w, a) * g;
                }
            }
            for (x, y) in via_actions.iter().zip(&kern) {
                bump(&mut consistency, (x - y).abs());
            }
            for (m, x) in mixed.iter_mut().zip(&kern) {
                *m += master[w] * x;
            }
        }
        for (x, y) in mixed.iter().zip(&by_state) {
            bump(&mut consistency, (x - y).abs());
        }
    }

    let r = discounted_option_return(mdp, opts, per_step).unwrap();
    let scale = 1.0 + r.by_option_action.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut family: f64 = 0.0;
    let mut recursion: f64 = 0.0;
    for s in 0..n {
        let master = opts.master_probs(s);
        for a in 0..na {
            let mix: f64 = (0..k).map(|w| master[w] * r.swa(s, w, a)).sum();
            bump(&mut family, (mix - r.by_action[s * na + a]).abs() / scale);
        }
        let v: f64 = (0..k).map(|w| master[w] * r.sw(s, w)).sum();
        bump(&mut family, (v - r.by_state[s]).abs() / scale);
        for w in 0..k {
            let q: f64 = (0..na).map(|a| opts.pi(s, w, a) * r.swa(s, w, a)).sum();
            bump(&mut family, (q - r.sw(s, w)).abs() / scale);
            if mdp.terminal[s] {
                continue;
            }
            for a in 0..na {
                // R(s,ω,a) = r̂ + γ Σ P(s',ω'|s,ω,a) R(s',ω').
                let ga = option_kernel_given_action(mdp, opts, s, w, a);
                let mut cont = 0.0;
                for s2 in (0..n).filter(|&s2| !mdp.terminal[s2]) {
                    for w2 in 0..k {
                        cont += ga[s2 * k + w2] * r.sw(s2, w2);
                    }
                }
                let rhs = per_step[(w * n + s) * na + a] + mdp.gamma * cont;
                bump(&mut recursion, (rhs - r.swa(s, w, a)).abs() / scale);
            }
        }
    }

    let mut rng = stream(n as u64, 5);
    let mut extract: f64 = 0.0;
    let mut half: f64 = 0.0;
    for _ in 0..200 {
        let lp = (1e-3 + rng.random::<f64>()).min(1.0).ln();
        let f = 6.0 * (rng.random::<f64>() - 0.5);
        bump(&mut extract, (extract_reward(lp, f) - (f - lp)).abs());
        let d = d_prob(lp, f);
        bump(&mut extract, ((d.ln() - (1.0 - d).ln()) - (f - lp)).abs());
        bump(&mut half, (d_prob(lp, lp) - 0.5).abs());
    }
    vec![
        Identity {
            name: "option_kernel normalization",
            max_error: norm,
            tolerance: 1e-9,
        },
        Identity {
            name: "kernel consistency",
            max_error: consistency,
            tolerance: 1e-12,
        },
        Identity {
            name: "return family",
            max_error: family,
            tolerance: 1e-10,
        },
        Identity {
            name: "return recursion through the option kernel",
            max_error: recursion,
            tolerance: 1e-10,
        },
        Identity {
            name: "extract_reward = f - log pi = log D - log(1-D)",
            max_error: extract,
            tolerance: 1e-9,
        },
        Identity {
            name: "D = 1/2 at f = log pi",
            max_error: half,
            tolerance: 0.0,
        },
    ]
}

/// Random instance of at most 6 states and 3 options, with a per-step
/// table in the layout of `discounted_option_return`.
pub fn random_instance(rng: &mut Stream) -> (TabularMdp, TabularOptions, Vec<f64>) {
    let n = rng.random_range(2..=6);
    let k = rng.random_range(1..=3);
    let na = rng.random_range(1..=3);
    let gamma = 0.3 + 0.6 * rng.random::<f64>();
    let with_terminal = n > 2 && rng.random::<bool>();
    let mdp = random_mdp(rng, n, na, gamma, with_terminal);
    let opts = TabularOptions::random(n, k, na, rng);
    let per_step: Vec<f64> = (0..k * n * na).map(|_| 2.0 * rng.random::<f64>() - 0.5).collect();
    (mdp, opts, per_step)
}

/// Worst error of each identity over `n_instances` random instances.
pub fn exactness(n_instances: usize, seed: u64) -> Vec<Identity> {
    let mut rng = stream(seed, 91);
    let mut worst: Vec<Identity> = Vec::new();
    for _ in 0..n_instances {
        let (mdp, opts, per_step) = random_instance(&mut rng);
        let errs = identity_errors(&mdp, &opts, &per_step);
        if worst.is_empty() {
            worst = errs;
        } else {
            for (w, e) in worst.iter_mut().zip(errs) {
                bump(&mut w.max_error, e.max_error);
            }
        }
    }
    worst
}

/// Discounted sum of `cost(s, ω, a, s')` along one option-chain rollout
/// started at `(s, ω, a)`, truncated once `γ^t` drops below 1e-13.
pub fn rollout_cost(
    mdp: &TabularMdp,
    opts: &TabularOptions,
    start: (usize, usize, usize),
    cost: &dyn Fn(usize, usize, usize, usize) -> f64,
    rng: &mut Stream,
) -> f64 {
    let (mut s, mut w, mut a) = start;
    let mut total = 0.0;
    let mut disc = 1.0;
    while disc > 1e-13 && !mdp.terminal[s] {
        let next = mdp.step(s, a, rng).unwrap().next;
        total += disc * cost(s, w, a, next);
        disc *= mdp.gamma;
        s = next;
        if mdp.terminal[s] {
            break;
        }
        if rng.random::<f64>() < opts.beta(s, w) {
            w = sample_categorical(&opts.master_probs(s), rng);
        }
        let probs: Vec<f64> = (0..opts.n_actions).map(|b| opts.pi(s, w, b)).collect();
        a = sample_categorical(&probs, rng);
    }
    total
}

#[derive(Debug, Clone)]
pub struct OracleCheck {
    pub name: &'static str,
    /// Largest |exact - MC| / SE.
    pub worst_z: f64,
    pub comparisons: usize,
}

fn mc_z(
    mdp: &TabularMdp,
    opts: &TabularOptions,
    exact: f64,
    start: &dyn Fn(&mut Stream) -> (usize, usize, usize),
    cost: &dyn Fn(usize, usize, usize, usize) -> f64,
    n: usize,
    rng: &mut Stream,
) -> f64 {
    let samples: Vec<f64> = (0..n)
        .map(|_| {
            let st = start(rng);
            rollout_cost(mdp, opts, st, cost, rng)
        })
        .collect();
    let mean = oirl::stats::mean(&samples);
    let se = oirl::stats::standard_error(&samples).max(1e-12);
    (mean - exact).abs() / se
}

/// Monte-Carlo checks of `discounted_option_return` (one `(s, ω, a)` entry
/// and one `R_Ω(s)` entry per instance) and `expected_loss_tables`.
pub fn monte_carlo_checks(n_instances: usize, n_rollouts: usize, seed: u64) -> Vec<OracleCheck> {
    let mut rng = stream(seed, 113);
    let mut ret_z: f64 = 0.0;
    let mut loss_z: f64 = 0.0;
    for _ in 0..n_instances {
        let (mdp, opts, per_step) = random_instance(&mut rng);
        let (n, k, na) = (mdp.n_states(), opts.n_options, opts.n_actions);
        let tables = discounted_option_return(&mdp, &opts, &per_step).unwrap();
        let live: Vec<usize> = (0..n).filter(|&s| !mdp.terminal[s]).collect();
        let s0 = *live.choose(&mut rng).unwrap();
        let (w0, a0) = (rng.random_range(0..k), rng.random_range(0..na));
        let cost = |s: usize, w: usize, a: usize, _s2: usize| per_step[(w * n + s) * na + a];
        let fixed = move |_: &mut Stream| (s0, w0, a0);
        ret_z = ret_z.max(mc_z(&mdp, &opts, tables.swa(s0, w0, a0), &fixed, &cost, n_rollouts, &mut rng));
        let s1 = *live.choose(&mut rng).unwrap();
        let o = opts.clone();
        let from_state = move |r: &mut Stream| {
            let w = sample_categorical(&o.master_probs(s1), r);
            let probs: Vec<f64> = (0..o.n_actions).map(|b| o.pi(s1, w, b)).collect();
            (s1, w, sample_categorical(&probs, r))
        };
        ret_z = ret_z.max(mc_z(&mdp, &opts, tables.by_state[s1], &from_state, &cost, n_rollouts, &mut rng));

        // Expected recursive loss under a small discriminator.
        let env = one_hot_env(mdp.clone());
        let arch = DiscArch {
            hidden: vec![8],
            activation: Activation::Tanh,
        };
        let disc = Discriminator::new(env.obs_dim(), k, na, mdp.gamma, DiscMode::StateOnly, &arch, &mut rng);
        let source = if rng.random::<bool>() { Source::Expert } else { Source::Novice };
        let losses = expected_loss_tables(&disc, &env, &opts, source).unwrap();
        let mut f = vec![0.0; n * na * n * k];
        for s in 0..n {
            for a in 0..na {
                for s2 in 0..n {
                    for w in 0..k {
                        f[((s * na + a) * n + s2) * k + w] = disc.f_value(&env, s, a, s2, w).unwrap();
                    }
                }
            }
        }
        let o2 = opts.clone();
        let lcost = move |s: usize, w: usize, a: usize, s2: usize| {
            cross_entropy(source, o2.pi(s, w, a).ln(), f[((s * na + a) * n + s2) * k + w]).0
        };
        loss_z = loss_z.max(mc_z(&mdp, &opts, losses.swa(s0, w0, a0), &fixed, &lcost, n_rollouts, &mut rng));
    }
    vec![
        OracleCheck {
            name: "discounted_option_return vs Monte Carlo",
            worst_z: ret_z,
            comparisons: 2 * n_instances,
        },
        OracleCheck {
            name: "expected_loss_tables vs Monte Carlo",
            worst_z: loss_z,
            comparisons: n_instances,
        },
    ]
}

/// `A_t = Σ_l (γλ)^l δ_{t+l}` computed term by term.
pub fn gae_oracle(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let v = |t: usize| if t < n { values[t] } else { bootstrap };
    (0..n)
        .map(|t| {
            (t..n)
                .map(|j| (gamma * lambda).powi((j - t) as i32) * (rewards[j] + gamma * v(j + 1) - values[j]))
                .sum()
        })
        .collect()
}

pub fn gae_max_error(n_cases: usize, seed: u64) -> f64 {
    let mut rng = stream(seed, 131);
    let mut worst: f64 = 0.0;
    for _ in 0..n_cases {
        let len = rng.random_range(1..=80);
        let r: Vec<f64> = (0..len).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let v: Vec<f64> = (0..len).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let boot = if rng.random::<bool>() { 0.0 } else { rng.random::<f64>() };
        let (g, l) = (rng.random::<f64>(), rng.random::<f64>());
        let fast = oirl::ppoc::gae(&r, &v, boot, g, l);
        let slow = gae_oracle(&r, &v, boot, g, l);
        for (a, b) in fast.iter().zip(&slow) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}
