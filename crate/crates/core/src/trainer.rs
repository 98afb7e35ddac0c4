//! The alternating adversarial loop: collect novice rollouts, train the
//! per-option discriminators on expert/novice mixtures with the recursive
//! loss, extract rewards, and update the option policies with PPOC.
//!
//! Each iteration draws from its own stream `indexed_stream(seed, ITERATION, t)`,
//! so a run resumed from a checkpoint at iteration `t` continues exactly as
//! the uninterrupted run would.

use crate::config::{DemoMode, RunConfig};
use crate::discriminator::{
    expand_recursive, extract_rewards, Discriminator, LossTerm, Source,
};
use crate::env::Environment;
use crate::metrics::{IterationMetrics, OptionMetrics};
use crate::nn::Adam;
use crate::options::{ActMode, OptionPolicy};
use crate::ppoc::{build_batch, ppoc_update, OptionNets, PpocOptimizer};
use crate::rng::{indexed_stream, stream, streams, Stream};
use crate::rollout::{
    self, assign_option_responsibilities, collect, fit_density, mixture_prob, DemoSet,
    OptionTrajectory,
};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;

/// Learner state carried across iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Number of completed iterations.
    pub iteration: usize,
    pub seed: u64,
    pub nets: OptionNets,
    pub ppoc_opt: PpocOptimizer,
    pub disc: Discriminator,
    pub disc_opt: Adam,
}

impl TrainState {
    pub fn init(cfg: &RunConfig, env: &Environment, seed: u64) -> Self {
        let mut rng = stream(seed, streams::INIT);
        let nets = OptionNets::new(env.obs_dim(), cfg.n_options, env.n_actions(), &cfg.policy_arch, &mut rng);
        let disc = Discriminator::new(
            env.obs_dim(),
            cfg.n_options,
            env.n_actions(),
            env.gamma(),
            cfg.disc.mode,
            &cfg.disc.arch,
            &mut rng,
        );
        let ppoc_opt = PpocOptimizer::new(&nets, &cfg.ppoc);
        let disc_opt = Adam::new(disc.n_params(), cfg.disc.lr, cfg.disc.adam_eps, None);
        Self {
            iteration: 0,
            seed,
            nets,
            ppoc_opt,
            disc,
            disc_opt,
        }
    }
}

/// Importance weights `exp(log_target - log_proposal)`, self-normalized to
/// mean 1 and clipped to `[lo, hi]`. Returns the weights and the number of
/// clipped entries.
pub fn importance_weights(log_ratio: &[f64], lo: f64, hi: f64) -> (Vec<f64>, usize) {
    if log_ratio.is_empty() {
        return (Vec::new(), 0);
    }
    let lse = crate::mdp::log_sum_exp(log_ratio.iter().copied());
    let ln_n = (log_ratio.len() as f64).ln();
    let mut clips = 0;
    let w = log_ratio
        .iter()
        .map(|&l| {
            let w = (l - lse + ln_n).exp();
            if w < lo || w > hi {
                clips += 1;
            }
            w.clamp(lo, hi)
        })
        .collect();
    (w, clips)
}

/// Root samples of one iteration's discriminator batch.
#[derive(Clone, Debug, Default)]
pub struct MixtureBatch {
    pub roots: Vec<LossTerm>,
    pub weight_clips: usize,
}

/// One demo step chosen for this iteration's expert batch, with its option
/// responsibilities.
#[derive(Clone, Debug)]
pub struct ExpertSample {
    pub step: rollout::DemoStep,
    pub resp: Vec<f64>,
}

/// Builds the root loss terms. Expert steps enter once per option, weighted
/// by their responsibility. Without importance sampling the novice term uses
/// the novice rollouts directly. With it, the novice term is estimated over
/// the whole mixture (expert and novice samples), each sample weighted by
/// `exp(f_ω) / μ_ω(a|s)` with `μ_ω = ½π_ω + ½p̂_ω` (self-normalized, clipped,
/// held constant during the gradient step).
pub fn build_mixture_batch(
    cfg: &RunConfig,
    state: &TrainState,
    env: &Environment,
    expert: &[ExpertSample],
    novice: &[OptionTrajectory],
    density: Option<&rollout::Density>,
) -> Result<MixtureBatch> {
    let nets = &state.nets;
    let mut roots = Vec::new();
    let mut mixture: Vec<LossTerm> = Vec::new();
    for e in expert {
        let st = e.step;
        let sp = nets.evaluate(st.s, env.obs(st.s));
        for (w, &r) in e.resp.iter().enumerate() {
            if r <= 0.0 {
                continue;
            }
            let term = LossTerm {
                s: st.s,
                a: st.a,
                s_next: st.s_next,
                terminal_next: st.done,
                option: w,
                source: Source::Expert,
                weight: r,
                log_pi: sp.actions[w][st.a].ln(),
                root: true,
            };
            roots.push(term);
            if density.is_some() {
                mixture.push(LossTerm {
                    source: Source::Novice,
                    ..term
                });
            }
        }
    }
    for tr in novice {
        for st in &tr.steps {
            mixture.push(LossTerm {
                s: st.s,
                a: st.a,
                s_next: st.s_next,
                terminal_next: st.done,
                option: st.option,
                source: Source::Novice,
                weight: 1.0,
                log_pi: st.log_pi_action,
                root: true,
            });
        }
    }
    let mut weight_clips = 0;
    if let Some(density) = density {
        let mut log_ratio = Vec::with_capacity(mixture.len());
        for t in &mixture {
            let f = state.disc.f_value(env, t.s, t.a, t.s_next, t.option)?;
            let key = env.mdp.state_key[t.s];
            let mu = mixture_prob(t.log_pi.exp(), density.prob(key, t.option, t.a));
            log_ratio.push(f - mu.ln());
        }
        let (w, clips) = importance_weights(&log_ratio, cfg.disc.weight_clip.0, cfg.disc.weight_clip.1);
        weight_clips = clips;
        for (t, wi) in mixture.iter_mut().zip(w) {
            t.weight *= wi;
        }
    }
    roots.extend(mixture);
    Ok(MixtureBatch { roots, weight_clips })
}

/// Where expert samples come from.
#[derive(Clone, Debug)]
pub enum DemoSource {
    Fixed(DemoSet),
    SelfImitation { n_traj: usize },
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub env: Environment,
    pub demos: DemoSource,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(cfg: RunConfig, env: Environment, demos: DemoSource, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if let DemoSource::Fixed(d) = &demos {
            if d.demos.is_empty() {
                return Err(Error::Contract("training needs a nonempty demo set".into()));
            }
        }
        let state = TrainState::init(&cfg, &env, seed);
        Ok(Self {
            cfg,
            env,
            demos,
            state,
        })
    }

    pub fn from_state(cfg: RunConfig, env: Environment, demos: DemoSource, state: TrainState) -> Self {
        Self {
            cfg,
            env,
            demos,
            state,
        }
    }

    /// Standard setup: tabular expert demos for the configured environment.
    pub fn with_expert_demos(cfg: RunConfig, seed: u64) -> Result<Self> {
        let env = cfg.env.build()?;
        let demos = match cfg.demo_mode {
            DemoMode::Expert => DemoSource::Fixed(expert_demos(&cfg, &env, seed)?),
            DemoMode::SelfImitation => DemoSource::SelfImitation { n_traj: cfg.n_demos },
        };
        Self::new(cfg, env, demos, seed)
    }

    /// Runs `n` iterations, handing each row to `sink`.
    pub fn run(&mut self, n: usize, sink: &mut dyn FnMut(&IterationMetrics, &TrainState)) -> Result<()> {
        for _ in 0..n {
            let m = self.iterate()?;
            sink(&m, &self.state);
        }
        Ok(())
    }

    pub fn iterate(&mut self) -> Result<IterationMetrics> {
        let t = self.state.iteration;
        let mut rng = indexed_stream(self.state.seed, streams::ITERATION, t as u64);
        let m = self.iterate_with(&mut rng).map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("iteration {t}: {msg}")),
            other => other,
        })?;
        self.state.iteration += 1;
        Ok(m)
    }

    fn iterate_with(&mut self, rng: &mut Stream) -> Result<IterationMetrics> {
        let cfg = &self.cfg;
        let env = &self.env;
        let k = cfg.n_options;

        // Novice rollouts under the frozen policy.
        let novice = collect(env, &self.state.nets, cfg.steps_per_iteration, ActMode::Stochastic, rng)?;
        let n_novice: usize = novice.iter().map(|t| t.len()).sum();

        // Expert samples and their option responsibilities.
        let generated;
        let demos = match &self.demos {
            DemoSource::Fixed(d) => d,
            DemoSource::SelfImitation { n_traj } => {
                generated =
                    rollout::sample_demos(&self.state.nets, "self", env, *n_traj, rng)?;
                &generated
            }
        };
        let resp = assign_option_responsibilities(&self.state.nets, env, demos, cfg.disc.responsibility);
        let all_steps: Vec<ExpertSample> = demos
            .steps()
            .zip(&resp.weights)
            .map(|(st, w)| ExpertSample {
                step: *st,
                resp: w.clone(),
            })
            .collect();
        let expert: Vec<ExpertSample> = (0..n_novice)
            .map(|_| all_steps[rng.random_range(0..all_steps.len())].clone())
            .collect();
        let density = if cfg.disc.importance_sampling {
            Some(fit_density(&env.mdp, demos, &resp, k, cfg.disc.density_pseudo_count)?)
        } else {
            None
        };

        // Discriminator phase (policy frozen).
        let batch = build_mixture_batch(cfg, &self.state, env, &expert, &novice, density.as_ref())?;
        let mut order: Vec<usize> = (0..batch.roots.len()).collect();
        let mut disc_loss = 0.0;
        let mut disc_acc = 0.0;
        let mut n_mb = 0usize;
        for _ in 0..cfg.disc.passes {
            order.shuffle(rng);
            for chunk in order.chunks(cfg.disc.minibatch) {
                let mut terms = Vec::new();
                for &i in chunk {
                    expand_recursive(&batch.roots[i], &self.state.nets, env, &cfg.disc.recursive, rng, &mut terms)?;
                }
                let bl = self.state.disc.batch_loss(env, &terms)?;
                let disc = &mut self.state.disc;
                let grads = [bl.grad.as_slice()];
                let mut groups = disc.param_groups();
                let flat_len: usize = groups.iter().map(|g| g.len()).sum();
                debug_assert_eq!(flat_len, bl.grad.len());
                // Split the flat gradient into the same groups.
                let mut parts: Vec<&[f64]> = Vec::with_capacity(groups.len());
                let mut off = 0;
                for g in &groups {
                    parts.push(&grads[0][off..off + g.len()]);
                    off += g.len();
                }
                self.state.disc_opt.step(&mut groups, &parts)?;
                disc_loss += bl.loss;
                disc_acc += bl.accuracy;
                n_mb += 1;
            }
        }
        let n_mb = n_mb.max(1) as f64;

        // Reward extraction (discriminator frozen) and policy phase.
        let rewards = extract_rewards(&self.state.disc, env, &novice)?;
        let ppo_batch = build_batch(&self.state.nets, &env.features, &novice, &rewards, &cfg.ppoc)?;
        let report = ppoc_update(
            &mut self.state.nets,
            &mut self.state.ppoc_opt,
            &env.features,
            &ppo_batch,
            &cfg.ppoc,
            rng,
        )?;

        // Metrics.
        let flat_rewards: Vec<f64> = rewards.iter().flatten().copied().collect();
        let mut per_option = vec![OptionMetrics::default(); k];
        let mut counts = vec![0usize; k];
        let mut beta_counts = vec![0usize; k];
        let mut beta_total = 0.0;
        let mut beta_n = 0usize;
        for (tr, rw) in novice.iter().zip(&rewards) {
            for (i, (st, r)) in tr.steps.iter().zip(rw).enumerate() {
                counts[st.option] += 1;
                per_option[st.option].mean_extracted_reward += r;
                if i > 0 {
                    let prev = tr.steps[i - 1].option;
                    per_option[prev].termination_rate += st.beta;
                    beta_counts[prev] += 1;
                    beta_total += st.beta;
                    beta_n += 1;
                }
            }
        }
        for w in 0..k {
            per_option[w].occupancy = counts[w] as f64 / n_novice.max(1) as f64;
            per_option[w].mean_extracted_reward /= counts[w].max(1) as f64;
            per_option[w].termination_rate /= beta_counts[w].max(1) as f64;
        }
        let returns: Vec<f64> = novice.iter().map(|t| t.ret).collect();
        Ok(IterationMetrics {
            iteration: self.state.iteration,
            disc_loss: disc_loss / n_mb,
            disc_accuracy: disc_acc / n_mb,
            mean_extracted_reward: crate::stats::mean(&flat_rewards),
            novice_return: crate::stats::mean(&returns),
            novice_episodes: novice.len(),
            novice_steps: n_novice,
            policy_loss: report.policy_loss,
            value_loss: report.value_loss,
            termination_loss: report.termination_loss,
            master_loss: report.master_loss,
            entropy: report.entropy,
            approx_kl: report.approx_kl,
            clip_fraction: report.clip_fraction,
            max_ratio_drift: report.max_ratio_drift,
            termination_rate: beta_total / beta_n.max(1) as f64,
            weight_clips: batch.weight_clips,
            responsibility_fallbacks: resp.fallbacks,
            branch_fallbacks: 0,
            per_option,
        })
    }
}

/// Demonstrations from the exact tabular expert of `env`.
pub fn expert_demos(cfg: &RunConfig, env: &Environment, seed: u64) -> Result<DemoSet> {
    let expert = rollout::make_expert_tabular(&env.mdp, cfg.expert)?;
    let mut rng = stream(seed, streams::DEMOS);
    rollout::sample_demos(&expert.policy, "tabular_expert", env, cfg.n_demos, &mut rng)
}

/// Mean and standard deviation of episode returns.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalStats {
    pub mean: f64,
    pub std: f64,
    pub episodes: usize,
}

pub fn evaluate_policy(
    policy: &dyn OptionPolicy,
    env: &Environment,
    n_episodes: usize,
    mode: ActMode,
    seed: u64,
) -> Result<EvalStats> {
    let mut rng = stream(seed, streams::EVALUATION);
    let mut returns = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let tr = rollout::run_episode(env, policy, mode, rng.random())?;
        returns.push(tr.ret);
    }
    Ok(EvalStats {
        mean: crate::stats::mean(&returns),
        std: if returns.len() > 1 { crate::stats::std_dev(&returns) } else { 0.0 },
        episodes: n_episodes,
    })
}
