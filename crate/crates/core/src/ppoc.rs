//! PPO over options: clipped-surrogate updates for the intra-option policies
//! and the policy over options, option-critic termination updates with a
//! deliberation cost, and a per-option critic `Q(s, ω)`.

use crate::env::FeatureTable;
use crate::nn::{sigmoid, softmax, Activation, Adam, Mlp};
use crate::options::{OptionPolicy, StatePolicy};
use crate::rollout::OptionTrajectory;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpocConfig {
    pub lr: f64,
    pub adam_eps: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub gae_lambda: f64,
    pub gamma: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    /// Deliberation cost `η`.
    pub deliberation: f64,
    pub normalize_advantages: bool,
}

impl Default for PpocConfig {
    fn default() -> Self {
        Self {
            lr: 7e-4,
            adam_eps: 1e-5,
            clip: 0.2,
            epochs: 4,
            minibatch: 256,
            gae_lambda: 0.95,
            gamma: 0.99,
            entropy_coef: 1e-2,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            deliberation: 0.1,
            normalize_advantages: true,
        }
    }
}

impl PpocConfig {
    /// Continuous-control profile; kept for config compatibility, unused by
    /// the gridworld experiments.
    pub fn mujoco() -> Self {
        Self {
            lr: 3e-4,
            epochs: 10,
            minibatch: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.clip > 0.0
            && self.clip < 1.0
            && (0.0..=1.0).contains(&self.gae_lambda)
            && (0.0..=1.0).contains(&self.gamma)
            && self.deliberation >= 0.0
            && self.epochs > 0
            && self.minibatch > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid PPOC settings: {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyArch {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for PolicyArch {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
        }
    }
}

/// Option-critic networks over observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptionNets {
    pub n_options: usize,
    pub n_actions: usize,
    /// Logits of `π_ω(a|s)` at output `ω * A + a`.
    pub intra: Mlp,
    /// Logits of `β_ω(s)`.
    pub termination: Mlp,
    /// Logits of `π_Ω(ω|s)`.
    pub master: Mlp,
    /// `Q(s, ω)`.
    pub critic: Mlp,
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

impl OptionNets {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        n_options: usize,
        n_actions: usize,
        arch: &PolicyArch,
        rng: &mut R,
    ) -> Self {
        let h = &arch.hidden;
        let act = arch.activation;
        Self {
            n_options,
            n_actions,
            intra: Mlp::orthogonal(&sizes(obs_dim, h, n_options * n_actions), act, 0.01, rng),
            termination: Mlp::orthogonal(&sizes(obs_dim, h, n_options), act, 0.01, rng),
            master: Mlp::orthogonal(&sizes(obs_dim, h, n_options), act, 0.01, rng),
            critic: Mlp::orthogonal(&sizes(obs_dim, h, n_options), act, 1.0, rng),
        }
    }

    pub fn q_values(&self, obs: &[f64]) -> Vec<f64> {
        self.critic.forward(obs).expect("observation size checked at construction")
    }

    fn policy_at(&self, obs: &[f64]) -> StatePolicy {
        let k = self.n_options;
        let na = self.n_actions;
        let logits = self.intra.forward(obs).expect("observation size checked at construction");
        let actions = (0..k).map(|w| softmax(&logits[w * na..(w + 1) * na])).collect();
        let master = softmax(&self.master.forward(obs).expect("observation size"));
        let termination = self
            .termination
            .forward(obs)
            .expect("observation size")
            .into_iter()
            .map(sigmoid)
            .collect();
        StatePolicy {
            master,
            actions,
            termination,
        }
    }

    pub fn actor_param_count(&self) -> usize {
        self.intra.n_params() + self.termination.n_params() + self.master.n_params()
    }

    pub fn is_finite(&self) -> bool {
        self.intra.is_finite() && self.termination.is_finite() && self.master.is_finite() && self.critic.is_finite()
    }
}

impl OptionPolicy for OptionNets {
    fn n_options(&self) -> usize {
        self.n_options
    }

    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn evaluate(&self, _s: usize, obs: &[f64]) -> StatePolicy {
        self.policy_at(obs)
    }
}

/// Generalized advantage estimates for one episode. `values[t]` is the value
/// of step `t`, `bootstrap` the value after the last step (0 when it ended in
/// a terminal state).
pub fn gae(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { bootstrap };
        let delta = rewards[t] + gamma * next - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    adv
}

/// One training sample for the PPOC losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PpoSample {
    pub s: usize,
    pub a: usize,
    pub option: usize,
    pub s_next: usize,
    pub selected: bool,
    pub old_log_pi: f64,
    pub old_log_master: f64,
    pub adv: f64,
    /// Critic regression target.
    pub ret: f64,
    /// `Q(s', ω) - V_Ω(s')` when `s'` is non-terminal.
    pub term_adv: Option<f64>,
    /// `Q(s, ω) - V_Ω(s)`.
    pub master_adv: f64,
}

#[derive(Clone, Debug, Default)]
pub struct AdvantageBatch {
    pub samples: Vec<PpoSample>,
}

/// Builds the batch from trajectories and per-step rewards. Values follow the
/// executed option chain: `v_t = Q(s_t, ω_t)` and the successor value is
/// `Q(s_{t+1}, ω_{t+1})`, 0 after a terminal state and `Q(s', ω_T)` after a
/// truncation.
pub fn build_batch(
    nets: &OptionNets,
    features: &FeatureTable,
    trajs: &[OptionTrajectory],
    rewards: &[Vec<f64>],
    cfg: &PpocConfig,
) -> Result<AdvantageBatch> {
    if rewards.len() != trajs.len() {
        return Err(Error::Contract("one reward vector per trajectory required".into()));
    }
    let mut cache: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut eval = |s: usize| -> (Vec<f64>, Vec<f64>) {
        cache
            .entry(s)
            .or_insert_with(|| {
                let obs = features.row(s);
                (nets.q_values(obs), nets.policy_at(obs).master)
            })
            .clone()
    };
    let mut samples = Vec::new();
    for (tr, rw) in trajs.iter().zip(rewards) {
        if rw.len() != tr.len() {
            return Err(Error::Contract("reward vector length differs from trajectory".into()));
        }
        if tr.is_empty() {
            continue;
        }
        let values: Vec<f64> = tr.steps.iter().map(|st| eval(st.s).0[st.option]).collect();
        let last = tr.steps[tr.len() - 1];
        let bootstrap = if last.done { 0.0 } else { eval(last.s_next).0[last.option] };
        let adv = gae(rw, &values, bootstrap, cfg.gamma, cfg.gae_lambda);
        for (t, st) in tr.steps.iter().enumerate() {
            let (q, m) = eval(st.s);
            let v: f64 = q.iter().zip(&m).map(|(a, b)| a * b).sum();
            let term_adv = if st.done {
                None
            } else {
                let (q2, m2) = eval(st.s_next);
                let v2: f64 = q2.iter().zip(&m2).map(|(a, b)| a * b).sum();
                Some(q2[st.option] - v2)
            };
            samples.push(PpoSample {
                s: st.s,
                a: st.a,
                option: st.option,
                s_next: st.s_next,
                selected: st.selected,
                old_log_pi: st.log_pi_action,
                old_log_master: st.log_pi_master,
                adv: adv[t],
                ret: adv[t] + values[t],
                term_adv,
                master_adv: q[st.option] - v,
            });
        }
    }
    if cfg.normalize_advantages && samples.len() > 1 {
        let advs: Vec<f64> = samples.iter().map(|s| s.adv).collect();
        let mean = crate::stats::mean(&advs);
        let std = crate::stats::std_dev(&advs);
        for s in &mut samples {
            s.adv = (s.adv - mean) / (std + 1e-8);
        }
    }
    Ok(AdvantageBatch { samples })
}

/// Loss value and flat gradient for one network.
#[derive(Clone, Debug)]
pub struct NetLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Clipped surrogate with entropy bonus for the intra-option policies:
/// `-mean[min(ρA, clip(ρ, 1±ε)A)] - c_H mean[H(π_ω(·|s))]`.
pub fn intra_loss(
    nets: &OptionNets,
    features: &FeatureTable,
    batch: &[PpoSample],
    cfg: &PpocConfig,
) -> Result<(NetLoss, SurrogateStats)> {
    let na = nets.n_actions;
    let n = batch.len().max(1) as f64;
    let mut grad = vec![0.0; nets.intra.n_params()];
    let mut loss = 0.0;
    let mut stats = SurrogateStats::default();
    for smp in batch {
        let tape = nets.intra.forward_tape(features.row(smp.s))?;
        let w = smp.option;
        let logits = &tape.output[w * na..(w + 1) * na];
        let p = softmax(logits);
        let logp = p[smp.a].ln();
        let ratio = (logp - smp.old_log_pi).exp();
        if !ratio.is_finite() {
            return Err(Error::NonFinite(format!("policy ratio at state {}", smp.s)));
        }
        let (obj, dobj_dratio) = clipped_objective(ratio, smp.adv, cfg.clip);
        let entropy: f64 = -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>();
        loss += (-obj - cfg.entropy_coef * entropy) / n;
        stats.record(ratio, cfg.clip, logp - smp.old_log_pi, entropy);
        // d(-obj)/dz_j = -dobj/dratio * ratio * (1{j=a} - p_j)
        // d(-H)/dz_j = p_j (log p_j + H)
        let mut up = vec![0.0; tape.output.len()];
        for j in 0..na {
            let ind = if j == smp.a { 1.0 } else { 0.0 };
            let d_obj = -dobj_dratio * ratio * (ind - p[j]);
            let d_ent = cfg.entropy_coef * p[j] * (p[j].ln() + entropy);
            up[w * na + j] = (d_obj + d_ent) / n;
        }
        nets.intra.backward(&tape, &up, &mut grad, false)?;
    }
    stats.finish(batch.len());
    Ok((NetLoss { loss, grad }, stats))
}

/// `min(ρA, clip(ρ)A)` and its derivative with respect to `ρ`. When the
/// clipped branch is selected the derivative is 0.
pub fn clipped_objective(ratio: f64, adv: f64, clip: f64) -> (f64, f64) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
    if unclipped <= clipped {
        (unclipped, adv)
    } else {
        (clipped, 0.0)
    }
}

/// Termination loss `mean[β_ω(s') (A(s', ω) + η)]` over samples with a
/// non-terminal successor. Descending it raises `β` where the active option
/// trails the master's average by more than `η`.
pub fn termination_loss(
    nets: &OptionNets,
    features: &FeatureTable,
    batch: &[PpoSample],
    cfg: &PpocConfig,
) -> Result<NetLoss> {
    let used: Vec<&PpoSample> = batch.iter().filter(|s| s.term_adv.is_some()).collect();
    let n = used.len().max(1) as f64;
    let mut grad = vec![0.0; nets.termination.n_params()];
    let mut loss = 0.0;
    for smp in used {
        let tape = nets.termination.forward_tape(features.row(smp.s_next))?;
        let w = smp.option;
        let b = sigmoid(tape.output[w]);
        let coef = smp.term_adv.unwrap_or(0.0) + cfg.deliberation;
        loss += b * coef / n;
        let mut up = vec![0.0; nets.n_options];
        up[w] = b * (1.0 - b) * coef / n;
        nets.termination.backward(&tape, &up, &mut grad, false)?;
    }
    Ok(NetLoss { loss, grad })
}

/// Clipped surrogate for the policy over options on selection steps, with
/// `Q(s, ω) - V_Ω(s)` advantages and an entropy bonus.
pub fn master_loss(
    nets: &OptionNets,
    features: &FeatureTable,
    batch: &[PpoSample],
    cfg: &PpocConfig,
) -> Result<NetLoss> {
    let used: Vec<&PpoSample> = batch.iter().filter(|s| s.selected).collect();
    let n = used.len().max(1) as f64;
    let k = nets.n_options;
    let mut grad = vec![0.0; nets.master.n_params()];
    let mut loss = 0.0;
    for smp in used {
        let tape = nets.master.forward_tape(features.row(smp.s))?;
        let p = softmax(&tape.output);
        let w = smp.option;
        let ratio = (p[w].ln() - smp.old_log_master).exp();
        if !ratio.is_finite() {
            return Err(Error::NonFinite(format!("master ratio at state {}", smp.s)));
        }
        let (obj, dobj) = clipped_objective(ratio, smp.master_adv, cfg.clip);
        let entropy: f64 = -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>();
        loss += (-obj - cfg.entropy_coef * entropy) / n;
        let mut up = vec![0.0; k];
        for j in 0..k {
            let ind = if j == w { 1.0 } else { 0.0 };
            up[j] = (-dobj * ratio * (ind - p[j]) + cfg.entropy_coef * p[j] * (p[j].ln() + entropy)) / n;
        }
        nets.master.backward(&tape, &up, &mut grad, false)?;
    }
    Ok(NetLoss { loss, grad })
}

/// `c_v mean[(Q(s, ω) - target)^2]`.
pub fn value_loss(
    nets: &OptionNets,
    features: &FeatureTable,
    batch: &[PpoSample],
    cfg: &PpocConfig,
) -> Result<NetLoss> {
    let n = batch.len().max(1) as f64;
    let mut grad = vec![0.0; nets.critic.n_params()];
    let mut loss = 0.0;
    for smp in batch {
        let tape = nets.critic.forward_tape(features.row(smp.s))?;
        let err = tape.output[smp.option] - smp.ret;
        loss += cfg.value_coef * err * err / n;
        let mut up = vec![0.0; nets.n_options];
        up[smp.option] = 2.0 * cfg.value_coef * err / n;
        nets.critic.backward(&tape, &up, &mut grad, false)?;
    }
    Ok(NetLoss { loss, grad })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SurrogateStats {
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub entropy: f64,
    /// Largest distance of a ratio outside `[1-ε, 1+ε]`.
    pub max_ratio_drift: f64,
}

impl SurrogateStats {
    fn record(&mut self, ratio: f64, clip: f64, log_ratio: f64, entropy: f64) {
        if (ratio - 1.0).abs() > clip {
            self.clip_fraction += 1.0;
        }
        self.approx_kl += -log_ratio;
        self.entropy += entropy;
        let drift = (ratio - (1.0 + clip)).max((1.0 - clip) - ratio).max(0.0);
        self.max_ratio_drift = self.max_ratio_drift.max(drift);
    }

    fn finish(&mut self, n: usize) {
        let n = n.max(1) as f64;
        self.clip_fraction /= n;
        self.approx_kl /= n;
        self.entropy /= n;
    }
}

/// Optimizer state for the actor (intra, termination, master jointly
/// clipped) and the critic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpocOptimizer {
    pub actor: Adam,
    pub critic: Adam,
}

impl PpocOptimizer {
    pub fn new(nets: &OptionNets, cfg: &PpocConfig) -> Self {
        Self {
            actor: Adam::new(nets.actor_param_count(), cfg.lr, cfg.adam_eps, Some(cfg.max_grad_norm)),
            critic: Adam::new(nets.critic.n_params(), cfg.lr, cfg.adam_eps, Some(cfg.max_grad_norm)),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateReport {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub termination_loss: f64,
    pub master_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub max_ratio_drift: f64,
    pub selection_steps: usize,
    pub minibatches: usize,
}

/// Full PPOC update over `epochs` passes of shuffled minibatches.
pub fn ppoc_update<R: Rng + ?Sized>(
    nets: &mut OptionNets,
    opt: &mut PpocOptimizer,
    features: &FeatureTable,
    batch: &AdvantageBatch,
    cfg: &PpocConfig,
    rng: &mut R,
) -> Result<UpdateReport> {
    let mut report = UpdateReport {
        selection_steps: batch.samples.iter().filter(|s| s.selected).count(),
        ..Default::default()
    };
    if batch.samples.is_empty() {
        return Ok(report);
    }
    let learn_termination = nets.n_options > 1;
    let mut idx: Vec<usize> = (0..batch.samples.len()).collect();
    for _ in 0..cfg.epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(cfg.minibatch) {
            let mb: Vec<PpoSample> = chunk.iter().map(|&i| batch.samples[i]).collect();
            let (pl, st) = intra_loss(nets, features, &mb, cfg)?;
            let tl = if learn_termination {
                termination_loss(nets, features, &mb, cfg)?
            } else {
                NetLoss {
                    loss: 0.0,
                    grad: vec![0.0; nets.termination.n_params()],
                }
            };
            let ml = master_loss(nets, features, &mb, cfg)?;
            let vl = value_loss(nets, features, &mb, cfg)?;
            opt.actor.step(
                &mut [
                    &mut nets.intra.params,
                    &mut nets.termination.params,
                    &mut nets.master.params,
                ],
                &[&pl.grad, &tl.grad, &ml.grad],
            )?;
            opt.critic.step(&mut [&mut nets.critic.params], &[&vl.grad])?;
            report.policy_loss += pl.loss;
            report.value_loss += vl.loss;
            report.termination_loss += tl.loss;
            report.master_loss += ml.loss;
            report.entropy += st.entropy;
            report.approx_kl += st.approx_kl;
            report.clip_fraction += st.clip_fraction;
            report.max_ratio_drift = report.max_ratio_drift.max(st.max_ratio_drift);
            report.minibatches += 1;
        }
    }
    let m = report.minibatches as f64;
    report.policy_loss /= m;
    report.value_loss /= m;
    report.termination_loss /= m;
    report.master_loss /= m;
    report.entropy /= m;
    report.approx_kl /= m;
    report.clip_fraction /= m;
    if !nets.is_finite() {
        return Err(Error::NonFinite("policy parameters after PPOC update".into()));
    }
    Ok(report)
}
