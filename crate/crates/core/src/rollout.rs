//! Trajectory collection, tabular experts, demonstrations and the per-option
//! demo densities used for importance sampling.

use crate::env::Environment;
use crate::mdp::{ActionValues, TabularMdp};
use crate::options::{composite_action, ActMode, OptionPolicy, TabularOptions};
use crate::rng::{split_seed, Stream};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const TRAJECTORY_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub s: usize,
    pub a: usize,
    pub option: usize,
    pub s_next: usize,
    pub reward: f64,
    /// The previously active option terminated on arrival in `s`.
    pub terminated: bool,
    /// The master policy picked `option` in `s`.
    pub selected: bool,
    pub log_pi_action: f64,
    pub log_pi_master: f64,
    pub beta: f64,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptionTrajectory {
    pub steps: Vec<Step>,
    /// Undiscounted environment return.
    pub ret: f64,
    /// Stopped by the rollout horizon rather than a terminal state.
    pub truncated: bool,
    pub seed: u64,
}

impl OptionTrajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn to_demo(&self) -> Demo {
        Demo {
            steps: self
                .steps
                .iter()
                .map(|st| DemoStep {
                    s: st.s,
                    a: st.a,
                    s_next: st.s_next,
                    reward: st.reward,
                    done: st.done,
                })
                .collect(),
            ret: self.ret,
            truncated: self.truncated,
            seed: self.seed,
        }
    }
}

/// Runs one episode from a fresh reset.
pub fn run_episode(
    env: &Environment,
    policy: &dyn OptionPolicy,
    mode: ActMode,
    seed: u64,
) -> Result<OptionTrajectory> {
    let mut rng = Stream::seed_from_u64(seed);
    let mut s = env.reset(&mut rng);
    let mut current = None;
    let mut steps = Vec::new();
    let mut ret = 0.0;
    let mut done = env.is_terminal(s);
    while !done && steps.len() < env.horizon {
        let sp = policy.evaluate(s, env.obs(s));
        let d = composite_action(&sp, current, mode, &mut rng);
        let out = env.step(s, d.action, &mut rng)?;
        steps.push(Step {
            s,
            a: d.action,
            option: d.option,
            s_next: out.next,
            reward: out.reward,
            terminated: d.terminated,
            selected: d.selected,
            log_pi_action: d.log_pi_action,
            log_pi_master: d.log_pi_master,
            beta: d.beta,
            done: out.done,
        });
        ret += out.reward;
        current = Some(d.option);
        s = out.next;
        done = out.done;
    }
    Ok(OptionTrajectory {
        steps,
        ret,
        truncated: !done,
        seed,
    })
}

/// Collects whole episodes until at least `n_steps` steps are gathered. Each
/// episode gets its own seed drawn from `rng`, recorded for replay.
pub fn collect<R: Rng + ?Sized>(
    env: &Environment,
    policy: &dyn OptionPolicy,
    n_steps: usize,
    mode: ActMode,
    rng: &mut R,
) -> Result<Vec<OptionTrajectory>> {
    check_policy(env, policy)?;
    let base: u64 = rng.random();
    let mut out = Vec::new();
    let mut total = 0;
    let mut episode = 0u64;
    while total < n_steps.max(1) {
        let traj = run_episode(env, policy, mode, split_seed(base, episode))?;
        episode += 1;
        total += traj.len();
        out.push(traj);
        if episode > 1_000_000 {
            return Err(Error::Contract("collection made no progress".into()));
        }
    }
    Ok(out)
}

fn check_policy(env: &Environment, policy: &dyn OptionPolicy) -> Result<()> {
    if policy.n_actions() != env.n_actions() {
        return Err(Error::Shape {
            context: "policy actions vs environment",
            expected: env.n_actions(),
            got: policy.n_actions(),
        });
    }
    Ok(())
}

/// Exact expert for an enumerable MDP.
#[derive(Clone, Debug)]
pub struct TabularExpert {
    pub values: ActionValues,
    pub policy: TabularOptions,
    pub kind: ExpertKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExpertKind {
    /// Greedy in `Q*` with probability `1 - epsilon`, uniform otherwise.
    EpsilonGreedy { epsilon: f64 },
    /// Boltzmann in the soft-optimal `Q` at the given temperature.
    Soft { temperature: f64 },
}

impl Default for ExpertKind {
    fn default() -> Self {
        ExpertKind::EpsilonGreedy { epsilon: 0.01 }
    }
}

pub fn make_expert_tabular(mdp: &TabularMdp, kind: ExpertKind) -> Result<TabularExpert> {
    let na = mdp.n_actions();
    let (values, probs) = match kind {
        ExpertKind::EpsilonGreedy { epsilon } => {
            let values = mdp.value_iteration(1e-11, 1_000_000)?;
            let mut probs = vec![epsilon / na as f64; mdp.n_states() * na];
            for s in 0..mdp.n_states() {
                probs[s * na + values.greedy(s)] += 1.0 - epsilon;
            }
            (values, probs)
        }
        ExpertKind::Soft { temperature } => {
            let values = mdp.soft_value_iteration(temperature, 1e-11, 1_000_000)?;
            let mut probs = Vec::with_capacity(mdp.n_states() * na);
            for s in 0..mdp.n_states() {
                let logits: Vec<f64> = values.row(s).iter().map(|q| q / temperature).collect();
                probs.extend(crate::nn::softmax(&logits));
            }
            (values, probs)
        }
    };
    Ok(TabularExpert {
        values,
        policy: TabularOptions::from_flat_policy(na, &probs),
        kind,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoStep {
    pub s: usize,
    pub a: usize,
    pub s_next: usize,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Demo {
    pub steps: Vec<DemoStep>,
    pub ret: f64,
    pub truncated: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoSet {
    pub demos: Vec<Demo>,
    pub generator: String,
    pub env_hash: String,
    pub warnings: Vec<String>,
}

impl DemoSet {
    pub fn n_steps(&self) -> usize {
        self.demos.iter().map(|d| d.steps.len()).sum()
    }

    pub fn steps(&self) -> impl Iterator<Item = &DemoStep> {
        self.demos.iter().flat_map(|d| d.steps.iter())
    }

    pub fn mean_return(&self) -> f64 {
        crate::stats::mean(&self.demos.iter().map(|d| d.ret).collect::<Vec<_>>())
    }
}

pub fn sample_demos<R: Rng + ?Sized>(
    policy: &dyn OptionPolicy,
    generator: &str,
    env: &Environment,
    n_traj: usize,
    rng: &mut R,
) -> Result<DemoSet> {
    if n_traj == 0 {
        return Err(Error::Contract("a demo set needs at least one trajectory".into()));
    }
    check_policy(env, policy)?;
    let base: u64 = rng.random();
    let mut demos = Vec::with_capacity(n_traj);
    for i in 0..n_traj {
        demos.push(run_episode(env, policy, ActMode::Stochastic, split_seed(base, i as u64))?.to_demo());
    }
    let mut warnings = Vec::new();
    if let Some(grid) = &env.grid {
        let goal = grid.sink(crate::grid::sink::GOAL);
        let failures = demos
            .iter()
            .filter(|d| d.steps.last().is_none_or(|st| st.s_next != goal))
            .count();
        if 2 * failures > n_traj {
            warnings.push(format!("expert missed the goal in {failures} of {n_traj} episodes"));
        }
    }
    Ok(DemoSet {
        demos,
        generator: generator.to_string(),
        env_hash: env.mdp.content_hash(),
        warnings,
    })
}

/// How demo steps are attributed to options.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Responsibility {
    /// `π_Ω(ω|s)` at each step.
    #[default]
    Master,
    /// Forward-filtered option posteriors given the observed actions.
    Filtered,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Responsibilities {
    /// Per step, per option weights; each row sums to 1.
    pub weights: Vec<Vec<f64>>,
    /// Steps where no option could explain the action.
    pub fallbacks: usize,
}

/// Option posteriors for every step of the demo set (in `DemoSet::steps`
/// order).
pub fn assign_option_responsibilities(
    policy: &dyn OptionPolicy,
    env: &Environment,
    demos: &DemoSet,
    mode: Responsibility,
) -> Responsibilities {
    let k = policy.n_options();
    let mut weights = Vec::with_capacity(demos.n_steps());
    let mut fallbacks = 0;
    for demo in &demos.demos {
        let mut prev: Option<(Vec<f64>, crate::options::StatePolicy)> = None;
        for st in &demo.steps {
            let sp = policy.evaluate(st.s, env.obs(st.s));
            let w = match mode {
                Responsibility::Master => sp.master.clone(),
                Responsibility::Filtered => {
                    let prior = match &prev {
                        None => sp.master.clone(),
                        Some((alpha, _)) => {
                            let mut p = vec![0.0; k];
                            for (w, &aw) in alpha.iter().enumerate() {
                                for (pw, sw) in p.iter_mut().zip(sp.switch_probs(w)) {
                                    *pw += aw * sw;
                                }
                            }
                            p
                        }
                    };
                    let mut post: Vec<f64> =
                        prior.iter().enumerate().map(|(w, p)| p * sp.actions[w][st.a]).collect();
                    let total: f64 = post.iter().sum();
                    if total > 0.0 && total.is_finite() {
                        post.iter_mut().for_each(|p| *p /= total);
                    } else {
                        fallbacks += 1;
                        post = vec![1.0 / k as f64; k];
                    }
                    post
                }
            };
            prev = Some((w.clone(), sp));
            weights.push(w);
        }
    }
    Responsibilities { weights, fallbacks }
}

pub const DENSITY_PSEUDO_COUNT: f64 = 0.1;

/// Per-option categorical action model `p̂_ω(a|key)`, pooled over states that
/// share a state key.
#[derive(Clone, Debug, PartialEq)]
pub struct Density {
    pub n_keys: usize,
    pub n_options: usize,
    pub n_actions: usize,
    pub probs: Vec<f64>,
}

impl Density {
    pub fn prob(&self, key: usize, w: usize, a: usize) -> f64 {
        self.probs[(key * self.n_options + w) * self.n_actions + a]
    }

    pub fn dist(&self, key: usize, w: usize) -> &[f64] {
        let i = (key * self.n_options + w) * self.n_actions;
        &self.probs[i..i + self.n_actions]
    }
}

/// Weighted maximum-likelihood fit with additive smoothing; keys without
/// demo mass come out uniform.
pub fn fit_density(
    mdp: &TabularMdp,
    demos: &DemoSet,
    resp: &Responsibilities,
    n_options: usize,
    pseudo_count: f64,
) -> Result<Density> {
    if demos.demos.is_empty() {
        return Err(Error::Contract("density fit on an empty demo set".into()));
    }
    let (n_keys, na) = (mdp.n_keys(), mdp.n_actions());
    let mut counts = vec![pseudo_count; n_keys * n_options * na];
    for (st, w) in demos.steps().zip(&resp.weights) {
        let key = mdp.state_key[st.s];
        for (o, &wo) in w.iter().enumerate() {
            counts[(key * n_options + o) * na + st.a] += wo;
        }
    }
    for row in counts.chunks_mut(na) {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|c| *c /= total);
        } else {
            row.iter_mut().for_each(|c| *c = 1.0 / na as f64);
        }
    }
    Ok(Density {
        n_keys,
        n_options,
        n_actions: na,
        probs: counts,
    })
}

/// `μ_ω(a|s) = ½ π_ω(a|s) + ½ p̂_ω(a|s)`.
pub fn mixture_prob(pi: f64, p_hat: f64) -> f64 {
    0.5 * pi + 0.5 * p_hat
}

pub fn mixture_dist(pi: &[f64], p_hat: &[f64]) -> Vec<f64> {
    pi.iter().zip(p_hat).map(|(&a, &b)| mixture_prob(a, b)).collect()
}

pub fn sample_mixture<R: Rng + ?Sized>(pi: &[f64], p_hat: &[f64], rng: &mut R) -> usize {
    // Pick a component, then an action from it.
    if rng.random::<f64>() < 0.5 {
        crate::rng::sample_categorical(pi, rng)
    } else {
        crate::rng::sample_categorical(p_hat, rng)
    }
}

/// Empirical state visitation frequencies of a batch.
pub fn visitation(trajs: &[OptionTrajectory], n_states: usize) -> Vec<f64> {
    let mut counts = vec![0.0; n_states];
    let mut total = 0.0;
    for t in trajs {
        for st in &t.steps {
            counts[st.s] += 1.0;
            total += 1.0;
        }
    }
    counts.iter().map(|c| c / total).collect()
}

// ---------------------------------------------------------------------------
// JSONL trajectory files

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHeader {
    pub version: u32,
    pub env: String,
    pub env_hash: String,
    pub generator: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Header(FileHeader),
    Step {
        episode: usize,
        t: usize,
        s: usize,
        a: usize,
        s_next: usize,
        reward: f64,
        done: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        option: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        terminated: Option<bool>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        selected: Option<bool>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        log_pi_action: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        log_pi_master: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        beta: Option<f64>,
    },
    End {
        episode: usize,
        length: usize,
        #[serde(rename = "return")]
        ret: f64,
        truncated: bool,
        seed: u64,
    },
}

/// Contents of a trajectory file. Demo files carry no option fields; their
/// steps are read back with option 0 and zero log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryFile {
    pub header: Option<FileHeader>,
    pub trajectories: Vec<OptionTrajectory>,
    /// Whether every step carried option annotations.
    pub labeled: bool,
    pub warnings: Vec<String>,
}

fn write_records<W: Write>(out: &mut W, records: impl Iterator<Item = Record>) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, &r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_trajectories(path: &Path, header: &FileHeader, trajs: &[OptionTrajectory]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut records = vec![Record::Header(header.clone())];
    for (episode, tr) in trajs.iter().enumerate() {
        for (t, st) in tr.steps.iter().enumerate() {
            records.push(Record::Step {
                episode,
                t,
                s: st.s,
                a: st.a,
                s_next: st.s_next,
                reward: st.reward,
                done: st.done,
                option: Some(st.option),
                terminated: Some(st.terminated),
                selected: Some(st.selected),
                log_pi_action: Some(st.log_pi_action),
                log_pi_master: Some(st.log_pi_master),
                beta: Some(st.beta),
            });
        }
        records.push(Record::End {
            episode,
            length: tr.len(),
            ret: tr.ret,
            truncated: tr.truncated,
            seed: tr.seed,
        });
    }
    write_records(&mut out, records.into_iter())?;
    out.flush()?;
    Ok(())
}

pub fn write_demos(path: &Path, header: &FileHeader, demos: &DemoSet) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut records = vec![Record::Header(header.clone())];
    for (episode, d) in demos.demos.iter().enumerate() {
        for (t, st) in d.steps.iter().enumerate() {
            records.push(Record::Step {
                episode,
                t,
                s: st.s,
                a: st.a,
                s_next: st.s_next,
                reward: st.reward,
                done: st.done,
                option: None,
                terminated: None,
                selected: None,
                log_pi_action: None,
                log_pi_master: None,
                beta: None,
            });
        }
        records.push(Record::End {
            episode,
            length: d.steps.len(),
            ret: d.ret,
            truncated: d.truncated,
            seed: d.seed,
        });
    }
    write_records(&mut out, records.into_iter())?;
    out.flush()?;
    Ok(())
}

pub fn read_trajectories(path: &Path) -> Result<TrajectoryFile> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut file = TrajectoryFile {
        header: None,
        trajectories: Vec::new(),
        labeled: true,
        warnings: Vec::new(),
    };
    let mut current: Vec<Step> = Vec::new();
    let mut n_lines = 0;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        n_lines = line_no;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        match record {
            Record::Header(h) => {
                if h.version != TRAJECTORY_SCHEMA_VERSION {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("unsupported schema version {}", h.version),
                    });
                }
                file.header = Some(h);
            }
            Record::Step {
                s,
                a,
                s_next,
                reward,
                done,
                option,
                terminated,
                selected,
                log_pi_action,
                log_pi_master,
                beta,
                ..
            } => {
                file.labeled &= option.is_some();
                current.push(Step {
                    s,
                    a,
                    option: option.unwrap_or(0),
                    s_next,
                    reward,
                    terminated: terminated.unwrap_or(false),
                    selected: selected.unwrap_or(current.is_empty()),
                    log_pi_action: log_pi_action.unwrap_or(0.0),
                    log_pi_master: log_pi_master.unwrap_or(0.0),
                    beta: beta.unwrap_or(0.0),
                    done,
                });
            }
            Record::End {
                length,
                ret,
                truncated,
                seed,
                ..
            } => {
                if length != current.len() {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("episode declares {length} steps, found {}", current.len()),
                    });
                }
                file.trajectories.push(OptionTrajectory {
                    steps: std::mem::take(&mut current),
                    ret,
                    truncated,
                    seed,
                });
            }
        }
    }
    if !current.is_empty() {
        return Err(Error::Parse {
            line: n_lines + 1,
            message: "file ends inside an episode".into(),
        });
    }
    if file.trajectories.is_empty() {
        file.labeled = false;
        file.warnings.push(format!("{} holds no trajectories", path.display()));
    }
    Ok(file)
}

pub fn read_demos(path: &Path) -> Result<DemoSet> {
    let file = read_trajectories(path)?;
    let header = file.header.clone();
    Ok(DemoSet {
        demos: file.trajectories.iter().map(|t| t.to_demo()).collect(),
        generator: header.as_ref().map(|h| h.generator.clone()).unwrap_or_default(),
        env_hash: header.map(|h| h.env_hash).unwrap_or_default(),
        warnings: file.warnings,
    })
}
