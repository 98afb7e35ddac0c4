//! Run configuration. Every field has a default so partial JSON files work;
//! the config hash covers the fully resolved structure.

use crate::discriminator::{DiscArch, DiscMode, RecursiveLossConfig};
use crate::env::EnvSpec;
use crate::grid::Side;
use crate::ppoc::{PolicyArch, PpocConfig};
use crate::rollout::{ExpertKind, Responsibility};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// First 16 hex digits of SHA-256.
pub fn short_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))[..16].to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscConfig {
    pub mode: DiscMode,
    pub lr: f64,
    pub adam_eps: f64,
    pub arch: DiscArch,
    pub recursive: RecursiveLossConfig,
    /// Passes over each iteration's mixture batch.
    pub passes: usize,
    /// Root samples per discriminator minibatch.
    pub minibatch: usize,
    pub importance_sampling: bool,
    pub weight_clip: (f64, f64),
    pub responsibility: Responsibility,
    pub density_pseudo_count: f64,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            mode: DiscMode::StateOnly,
            lr: 1e-3,
            adam_eps: 1e-5,
            arch: DiscArch::default(),
            recursive: RecursiveLossConfig::default(),
            passes: 1,
            minibatch: 256,
            importance_sampling: true,
            weight_clip: (0.1, 10.0),
            responsibility: Responsibility::Master,
            density_pseudo_count: crate::rollout::DENSITY_PSEUDO_COUNT,
        }
    }
}

/// Where expert samples come from during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoMode {
    /// A fixed demonstration set produced by the tabular expert (or a file).
    #[default]
    Expert,
    /// Fresh demos from the current policy every iteration.
    SelfImitation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub env: EnvSpec,
    pub n_options: usize,
    pub seeds: Vec<u64>,
    pub iterations: usize,
    pub steps_per_iteration: usize,
    pub n_demos: usize,
    pub expert: ExpertKind,
    pub demo_mode: DemoMode,
    /// Demo file; generated from the expert when absent.
    pub demos: Option<PathBuf>,
    pub disc: DiscConfig,
    pub ppoc: PpocConfig,
    pub policy_arch: PolicyArch,
    pub eval_episodes: usize,
    /// Checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: usize,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvSpec::LavaCrossing {
                side: Side::Middle,
                size: 8,
                encoding: Default::default(),
            },
            n_options: 2,
            seeds: vec![0],
            iterations: 300,
            steps_per_iteration: 512,
            n_demos: 50,
            expert: ExpertKind::default(),
            demo_mode: DemoMode::Expert,
            demos: None,
            disc: DiscConfig::default(),
            ppoc: PpocConfig::default(),
            policy_arch: PolicyArch::default(),
            eval_episodes: 20,
            checkpoint_every: 0,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_options == 0 {
            return Err(Error::Config("n_options must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.n_demos == 0 {
            return Err(Error::Config("n_demos must be at least 1".into()));
        }
        let (lo, hi) = self.disc.weight_clip;
        if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0) {
            return Err(Error::Config(format!("weight clip ({lo}, {hi}) must bracket 1")));
        }
        if self.disc.minibatch == 0 || self.steps_per_iteration == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        self.ppoc.validate()?;
        self.env.build().map(|_| ())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// First 16 hex digits of SHA-256 over the compact JSON form.
    pub fn hash(&self) -> String {
        short_hash(&serde_json::to_string(self).expect("config serializes"))
    }

    /// Hash of the settings that shape a single seed's trajectory. Excludes
    /// the seed list, output location and run length, so a longer run can
    /// resume a shorter one.
    pub fn run_hash(&self) -> String {
        let mut c = self.clone();
        c.seeds.clear();
        c.output_dir = PathBuf::new();
        c.iterations = 0;
        c.checkpoint_every = 0;
        c.hash()
    }

    /// Small continuing grid used for reward-recovery experiments. Short
    /// episodes from the uniform start spread demos over every cell.
    pub fn recovery() -> Self {
        Self {
            env: EnvSpec::RecoveryGrid {
                gamma: 0.9,
                horizon: 10,
            },
            n_demos: 300,
            expert: ExpertKind::Soft { temperature: 0.3 },
            disc: DiscConfig {
                passes: 5,
                ..DiscConfig::default()
            },
            ppoc: PpocConfig {
                gamma: 0.9,
                ..PpocConfig::default()
            },
            iterations: 150,
            ..Self::default()
        }
    }
}
