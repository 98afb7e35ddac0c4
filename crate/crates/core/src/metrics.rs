//! Per-iteration training metrics and their CSV encodings.
//!
//! Files start with a comment line `# schema=<n> config=<hash>`. Floats are
//! written with Rust's shortest round-trip formatting, so identical runs give
//! byte-identical files.

use std::fmt::Write as _;

pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub disc_loss: f64,
    pub disc_accuracy: f64,
    pub mean_extracted_reward: f64,
    pub novice_return: f64,
    pub novice_episodes: usize,
    pub novice_steps: usize,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub termination_loss: f64,
    pub master_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub max_ratio_drift: f64,
    pub termination_rate: f64,
    pub weight_clips: usize,
    pub responsibility_fallbacks: usize,
    pub branch_fallbacks: usize,
    pub per_option: Vec<OptionMetrics>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptionMetrics {
    /// Fraction of novice steps run under this option.
    pub occupancy: f64,
    /// Mean `β` of this option where it was active.
    pub termination_rate: f64,
    pub mean_extracted_reward: f64,
}

const COLUMNS: [&str; 19] = [
    "iteration",
    "disc_loss",
    "disc_accuracy",
    "mean_extracted_reward",
    "novice_return",
    "novice_episodes",
    "novice_steps",
    "policy_loss",
    "value_loss",
    "termination_loss",
    "master_loss",
    "entropy",
    "approx_kl",
    "clip_fraction",
    "max_ratio_drift",
    "termination_rate",
    "weight_clips",
    "responsibility_fallbacks",
    "branch_fallbacks",
];

pub fn header_comment(config_hash: &str) -> String {
    format!("# schema={METRICS_SCHEMA_VERSION} config={config_hash}\n")
}

pub fn metrics_header(config_hash: &str) -> String {
    format!("{}{}\n", header_comment(config_hash), COLUMNS.join(","))
}

pub fn metrics_row(m: &IterationMetrics) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        m.iteration,
        m.disc_loss,
        m.disc_accuracy,
        m.mean_extracted_reward,
        m.novice_return,
        m.novice_episodes,
        m.novice_steps,
        m.policy_loss,
        m.value_loss,
        m.termination_loss,
        m.master_loss,
        m.entropy,
        m.approx_kl,
        m.clip_fraction,
        m.max_ratio_drift,
        m.termination_rate,
        m.weight_clips,
        m.responsibility_fallbacks,
        m.branch_fallbacks,
    );
    s
}

pub fn option_header(config_hash: &str) -> String {
    format!("{}iteration,option,metric,value\n", header_comment(config_hash))
}

/// Long-format rows, one per (option, metric).
pub fn option_rows(m: &IterationMetrics) -> String {
    let mut s = String::new();
    for (w, o) in m.per_option.iter().enumerate() {
        let _ = writeln!(s, "{},{w},occupancy,{}", m.iteration, o.occupancy);
        let _ = writeln!(s, "{},{w},termination_rate,{}", m.iteration, o.termination_rate);
        let _ = writeln!(s, "{},{w},mean_extracted_reward,{}", m.iteration, o.mean_extracted_reward);
    }
    s
}

/// Parses the data rows of a metrics file back into `(column, values)`.
pub fn read_column(text: &str, column: &str) -> Option<Vec<f64>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next()?.split(',').collect();
    let idx = header.iter().position(|&c| c == column)?;
    lines
        .map(|l| l.split(',').nth(idx).and_then(|v| v.parse().ok()))
        .collect()
}
