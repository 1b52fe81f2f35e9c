//! Training configuration.
//!
//! Config files are flat TOML tables whose keys mirror [`TrainConfig`]'s
//! fields. Missing keys take their defaults and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::EnvKind;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelerKind {
    Oracle,
    Human,
    /// Human labels, with queries left unlabeled past the timeout handled by
    /// the oracle (or dropped).
    Fallback,
}

impl std::str::FromStr for LabelerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(LabelerKind::Oracle),
            "human" => Ok(LabelerKind::Human),
            "fallback" => Ok(LabelerKind::Fallback),
            other => Err(Error::Config(format!(
                "unknown labeler {other:?} (expected oracle, human or fallback)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub env: EnvKind,
    pub seed: u64,
    /// Episodes to run.
    pub episodes: usize,
    pub labeler: LabelerKind,

    pub no_hf: bool,
    pub no_ddc: bool,
    pub no_eed: bool,

    /// Subgoal-success rollouts per episode.
    pub eval_rollouts: usize,
    /// High-level update iterations per episode.
    pub high_iterations: usize,
    /// Low-level update iterations per episode.
    pub low_iterations: usize,

    pub high_hidden: Vec<usize>,
    pub high_actor_lr: f64,
    pub high_critic_lr: f64,
    pub high_batch_size: usize,
    pub high_buffer_size: usize,
    pub high_gamma: f64,
    pub tau: f64,
    pub beta: f64,
    /// Rewrite only the most recent episodes of the high-level buffer (0 = all).
    pub rewrite_window: usize,

    pub distance_hidden: Vec<usize>,
    pub distance_lr: f64,
    pub distance_buffer_size: usize,
    pub distance_batch_size: usize,
    pub distance_iterations: usize,
    pub distance_within_pairs: usize,
    pub distance_augment_pairs: usize,

    pub reward_hidden: Vec<usize>,
    pub reward_lr: f64,
    pub reward_buffer_size: usize,
    pub reward_batch_size: usize,
    pub reward_epochs: usize,
    /// Multiplier on reward differences inside the preference likelihood.
    pub reward_logit_scale: f64,
    pub query_frequency: usize,
    pub batch_queries: usize,
    pub near_policy_episodes: usize,

    pub k_init: f64,
    pub delta_k: f64,
    pub k_min: f64,
    pub k_max: f64,
    pub high_threshold: f64,
    pub low_threshold: f64,
    pub alpha_init: f64,
    pub alpha_lr: f64,

    pub low_hidden: Vec<usize>,
    pub low_actor_lr: f64,
    pub low_critic_lr: f64,
    pub low_batch_size: usize,
    pub low_buffer_size: usize,
    pub low_gamma: f64,
    pub explore_epsilon_start: f64,
    pub explore_epsilon_end: f64,
    pub explore_epsilon_episodes: usize,
    pub action_noise: f64,
    pub target_noise: f64,
    pub target_noise_clip: f64,
    pub hindsight_ratio: f64,

    pub rnd_hidden: Vec<usize>,
    pub rnd_output: usize,
    pub rnd_lr: f64,
    pub rnd_bonus_scale: f64,

    /// Environment-success evaluation every this many episodes (0 = never).
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Stop as soon as an evaluation reaches 100% success.
    pub stop_at_success: bool,

    /// Checkpoint every this many episodes (0 = only at the end).
    pub checkpoint_interval: usize,
    pub checkpoint_buffers: bool,

    pub label_timeout_secs: f64,
    /// With the fallback labeler, drop timed-out queries instead of oracle-labeling them.
    pub fallback_drop: bool,
    pub serve_port: Option<u16>,
    pub static_dir: Option<String>,

    /// Count reward-stream violations during low-level updates.
    pub audit_decoupling: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let wide = vec![256, 256, 256];
        Self {
            env: EnvKind::FourRooms,
            seed: 0,
            episodes: 5000,
            labeler: LabelerKind::Oracle,
            no_hf: false,
            no_ddc: false,
            no_eed: false,
            eval_rollouts: 10,
            high_iterations: 40,
            low_iterations: 40,
            high_hidden: wide.clone(),
            high_actor_lr: 3e-4,
            high_critic_lr: 3e-4,
            high_batch_size: 256,
            high_buffer_size: 1_000_000,
            high_gamma: 0.95,
            tau: 0.005,
            beta: 0.1,
            rewrite_window: 0,
            distance_hidden: wide.clone(),
            distance_lr: 3e-4,
            distance_buffer_size: 1000,
            distance_batch_size: 256,
            distance_iterations: 10,
            distance_within_pairs: crate::distance::DEFAULT_WITHIN_PAIRS,
            distance_augment_pairs: crate::distance::DEFAULT_AUGMENT_PAIRS,
            reward_hidden: wide.clone(),
            reward_lr: 3e-4,
            reward_buffer_size: 1000,
            reward_batch_size: 256,
            reward_epochs: 20,
            reward_logit_scale: 1.0,
            query_frequency: 50,
            batch_queries: 50,
            near_policy_episodes: crate::replay::DEFAULT_NEAR_POLICY_EPISODES,
            k_init: 0.05,
            delta_k: 0.05,
            k_min: 0.05,
            k_max: 1.0,
            high_threshold: 0.6,
            low_threshold: 0.3,
            alpha_init: 1.0,
            alpha_lr: 1e-3,
            low_hidden: wide.clone(),
            low_actor_lr: 1e-3,
            low_critic_lr: 1e-3,
            low_batch_size: 512,
            low_buffer_size: 1_000_000,
            low_gamma: 0.95,
            explore_epsilon_start: 0.2,
            explore_epsilon_end: 0.05,
            explore_epsilon_episodes: 1000,
            action_noise: 0.1,
            target_noise: 0.2,
            target_noise_clip: 0.5,
            hindsight_ratio: 0.8,
            rnd_hidden: wide,
            rnd_output: 512,
            rnd_lr: 3e-4,
            rnd_bonus_scale: 1.0,
            eval_interval: 25,
            eval_episodes: 50,
            stop_at_success: false,
            checkpoint_interval: 0,
            checkpoint_buffers: false,
            label_timeout_secs: 300.0,
            fallback_drop: false,
            serve_port: None,
            static_dir: None,
            audit_decoupling: false,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("episodes", self.episodes),
            ("eval_rollouts", self.eval_rollouts),
            ("high_iterations", self.high_iterations),
            ("low_iterations", self.low_iterations),
            ("high_batch_size", self.high_batch_size),
            ("high_buffer_size", self.high_buffer_size),
            ("distance_buffer_size", self.distance_buffer_size),
            ("distance_batch_size", self.distance_batch_size),
            ("distance_within_pairs", self.distance_within_pairs),
            ("reward_buffer_size", self.reward_buffer_size),
            ("reward_batch_size", self.reward_batch_size),
            ("reward_epochs", self.reward_epochs),
            ("query_frequency", self.query_frequency),
            ("near_policy_episodes", self.near_policy_episodes),
            ("low_batch_size", self.low_batch_size),
            ("low_buffer_size", self.low_buffer_size),
            ("rnd_output", self.rnd_output),
            ("eval_episodes", self.eval_episodes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let unit = [
            ("tau", self.tau),
            ("high_gamma", self.high_gamma),
            ("low_gamma", self.low_gamma),
            ("hindsight_ratio", self.hindsight_ratio),
            ("high_threshold", self.high_threshold),
            ("low_threshold", self.low_threshold),
            ("explore_epsilon_start", self.explore_epsilon_start),
            ("explore_epsilon_end", self.explore_epsilon_end),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.low_threshold > self.high_threshold {
            return Err(Error::Config("low_threshold exceeds high_threshold".into()));
        }
        if !(self.k_min <= self.k_init && self.k_init <= self.k_max) {
            return Err(Error::Config("k_init must lie in [k_min, k_max]".into()));
        }
        if !(self.reward_logit_scale > 0.0) {
            return Err(Error::Config("reward_logit_scale must be positive".into()));
        }
        if self.alpha_init < 0.0 || self.beta < 0.0 || self.delta_k < 0.0 {
            return Err(Error::Config("alpha_init, beta and delta_k must be nonnegative".into()));
        }
        for (name, h) in [
            ("high_hidden", &self.high_hidden),
            ("distance_hidden", &self.distance_hidden),
            ("reward_hidden", &self.reward_hidden),
            ("low_hidden", &self.low_hidden),
            ("rnd_hidden", &self.rnd_hidden),
        ] {
            if h.contains(&0) {
                return Err(Error::Config(format!("{name} widths must be positive")));
            }
        }
        Ok(())
    }

    /// Exploration ε for an episode, linear from start to end.
    pub fn explore_epsilon(&self, episode: u64) -> f64 {
        if self.explore_epsilon_episodes == 0 {
            return self.explore_epsilon_end;
        }
        if episode >= self.explore_epsilon_episodes as u64 {
            return self.explore_epsilon_end;
        }
        let t = episode as f64 / self.explore_epsilon_episodes as f64;
        self.explore_epsilon_start + t * (self.explore_epsilon_end - self.explore_epsilon_start)
    }

    /// Whether preference queries are issued at all.
    pub fn feedback_enabled(&self) -> bool {
        !self.no_hf && self.batch_queries > 0
    }
}
