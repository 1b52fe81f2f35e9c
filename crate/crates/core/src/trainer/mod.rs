//! The training loop.
//!
//! Each episode alternates subgoal segments: the high level issues a
//! subgoal, the exploration policy acts until that subgoal is reached or the
//! episode ends, and one high-level transition is stored per segment. After
//! the rollout come the high-level updates (policy then dual variable), the
//! low-level updates, preference queries at the configured cadence, distance
//! training, subgoal-success rollouts with the base policy, and the `k`
//! adjustment.

mod checkpoint;
pub mod config;
mod heatmap;
pub mod metrics;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotate::{Bridge, StatusSnapshot};
use crate::distance::{build_distance_batch, DistanceModel, PairBuffer};
use crate::env::{goal_reward, Env, EnvSpec};
use crate::error::{Error, Result};
use crate::high::{high_reward, Curriculum, DualState, GoalBox, HighConfig, HighPolicy, SubgoalMode};
use crate::low::{update_low, DecouplingAudit, DualPolicy, Exploration, LowConfig, UpdateSettings};
use crate::prefs::{generate_queries, oracle_label, PreferenceBuffer, PreferenceRecord, QueryPair, RewardModel};
use crate::replay::{rewrite_high_rewards, GoalTransition, HighBuffer, HighTransition, LowBuffer};
use crate::rnd::{RndPair, RunningStats};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{LabelerKind, TrainConfig};
pub use heatmap::{HeatCell, HEATMAP_HEADER};
pub use metrics::{MetricsRow, MetricsWriter, METRICS_HEADER};

/// One call of the `k` controller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KEvent {
    pub episode: u64,
    pub success_rate: f64,
    pub k_before: f64,
    pub k_after: f64,
}

/// Everything a checkpoint restores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub config: TrainConfig,
    /// Episodes completed so far.
    pub episode: u64,
    pub high: HighPolicy,
    pub dual: DualState,
    pub curriculum: Curriculum,
    pub low: DualPolicy,
    pub rnd: RndPair,
    pub rnd_stats: RunningStats,
    pub reward: RewardModel,
    pub distance: DistanceModel,
    pub distance_pairs: PairBuffer,
    pub preferences: PreferenceBuffer,
    pub high_buffer: HighBuffer,
    pub low_buffer: LowBuffer,
    pub rng: ChaCha8Rng,
    pub next_query_id: u64,
    pub labels_total: u64,
    pub queries_issued: u64,
    /// Queries handed to the annotation service and not yet resolved.
    pub outstanding: BTreeMap<u64, QueryPair>,
    pub audit: DecouplingAudit,
    pub k_events: Vec<KEvent>,
    /// Episode count at the first evaluation with 100% success.
    pub first_success: Option<u64>,
    pub last_eval: Option<f64>,
}

/// Mixes a run seed with a stream tag into an independent seed.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_TRAIN_ENV: u64 = 1;
const STREAM_SUBGOAL_EVAL: u64 = 2;
const STREAM_ENV_EVAL: u64 = 3;

/// Outcome of [`Trainer::run`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub episodes: u64,
    pub first_success: Option<u64>,
    pub rows: Vec<MetricsRow>,
}

pub struct Trainer {
    state: TrainerState,
    env: Env,
    bridge: Option<Bridge>,
    issued_at: BTreeMap<u64, Instant>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let env = Env::new(config.env);
        let spec = env.spec().clone();
        let s = config.seed;
        let goal_box = GoalBox::new(&spec.goal_low, &spec.goal_high)?;
        let high = HighPolicy::new(
            spec.state_dim,
            goal_box,
            &HighConfig {
                hidden: config.high_hidden.clone(),
                actor_lr: config.high_actor_lr,
                critic_lr: config.high_critic_lr,
                gamma: config.high_gamma,
                tau: config.tau,
                beta: config.beta,
            },
            derive_seed(s, 10, 0),
        )?;
        let low_cfg = LowConfig {
            hidden: config.low_hidden.clone(),
            actor_lr: config.low_actor_lr,
            critic_lr: config.low_critic_lr,
            gamma: config.low_gamma,
            tau: config.tau,
            action_noise: config.action_noise,
            target_noise: config.target_noise,
            target_noise_clip: config.target_noise_clip,
        };
        let low = DualPolicy::new(
            spec.state_dim + spec.goal_dim,
            &spec.action_space,
            &low_cfg,
            !config.no_eed,
            derive_seed(s, 11, 0),
        )?;
        let mut rnd_sizes = vec![spec.state_dim];
        rnd_sizes.extend_from_slice(&config.rnd_hidden);
        rnd_sizes.push(config.rnd_output);
        let rnd = RndPair::new(&rnd_sizes, config.rnd_lr, derive_seed(s, 12, 0))?;
        let reward = RewardModel::new(
            spec.state_dim,
            spec.goal_dim,
            &config.reward_hidden,
            config.reward_lr,
            derive_seed(s, 13, 0),
        )?
        .with_logit_scale(config.reward_logit_scale)?;
        let distance = DistanceModel::new(spec.goal_dim, &config.distance_hidden, config.distance_lr, derive_seed(s, 14, 0))?;
        let curriculum = Curriculum {
            k: config.k_init,
            delta_k: config.delta_k,
            k_min: config.k_min,
            k_max: config.k_max,
            high_threshold: config.high_threshold,
            low_threshold: config.low_threshold,
        };
        let dual = DualState {
            alpha: if config.no_ddc { 0.0 } else { config.alpha_init },
            alpha_lr: config.alpha_lr,
        };
        let state = TrainerState {
            high,
            dual,
            curriculum,
            low,
            rnd,
            rnd_stats: RunningStats::new(),
            reward,
            distance,
            distance_pairs: PairBuffer::new(config.distance_buffer_size),
            preferences: PreferenceBuffer::new(config.reward_buffer_size),
            high_buffer: HighBuffer::new(config.high_buffer_size),
            low_buffer: LowBuffer::new(config.low_buffer_size),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(s, 15, 0)),
            next_query_id: 0,
            labels_total: 0,
            queries_issued: 0,
            outstanding: BTreeMap::new(),
            audit: DecouplingAudit::default(),
            k_events: Vec::new(),
            first_success: None,
            last_eval: None,
            episode: 0,
            config,
        };
        Ok(Self {
            state,
            env,
            bridge: None,
            issued_at: BTreeMap::new(),
        })
    }

    pub fn from_state(state: TrainerState) -> Result<Self> {
        state.config.validate()?;
        Ok(Self {
            env: Env::new(state.config.env),
            state,
            bridge: None,
            issued_at: BTreeMap::new(),
        })
    }

    /// Connects the annotation-service queues. Required for the human and
    /// fallback labelers.
    pub fn attach_bridge(&mut self, bridge: Bridge) {
        let now = Instant::now();
        for id in self.state.outstanding.keys() {
            self.issued_at.insert(*id, now);
        }
        if !self.state.outstanding.is_empty() {
            bridge.offer(self.state.outstanding.values().cloned().collect());
        }
        self.bridge = Some(bridge);
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut TrainerState {
        &mut self.state
    }

    pub fn into_state(self) -> TrainerState {
        self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.state.config
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    pub fn spec(&self) -> &EnvSpec {
        self.env.spec()
    }

    fn epsilon(&self) -> f64 {
        self.env.spec().epsilon
    }

    /// Runs until `config.episodes` are complete (or the first fully
    /// successful evaluation when `stop_at_success` is set). With `out_dir`,
    /// metrics are appended there and checkpoints written to
    /// `out_dir/checkpoint.bin`.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<RunSummary> {
        let mut writer = match out_dir {
            Some(d) => Some(MetricsWriter::open(d, self.state.episode > 0)?),
            None => None,
        };
        let ckpt: Option<PathBuf> = out_dir.map(|d| d.join("checkpoint.bin"));
        let mut rows = Vec::new();
        while (self.state.episode as usize) < self.state.config.episodes {
            let started = Instant::now();
            let row = self.run_episode()?;
            if let Some(w) = writer.as_mut() {
                w.write(&row, started.elapsed().as_secs_f64())?;
            }
            let interval = self.state.config.checkpoint_interval;
            if let Some(p) = &ckpt {
                if interval > 0 && self.state.episode % interval as u64 == 0 {
                    self.save(p)?;
                }
            }
            if let Some(e) = row.eval_success {
                log::info!(
                    "episode {}: eval success {e:.2}, k {:.2}, alpha {:.3}, labels {}",
                    self.state.episode,
                    row.k,
                    row.alpha,
                    row.labels_total
                );
            }
            let stop = self.state.config.stop_at_success && row.eval_success == Some(1.0);
            rows.push(row);
            if stop {
                break;
            }
        }
        if let Some(p) = &ckpt {
            self.save(p)?;
        }
        Ok(RunSummary {
            episodes: self.state.episode,
            first_success: self.state.first_success,
            rows,
        })
    }

    /// One full iteration of the outer loop.
    pub fn run_episode(&mut self) -> Result<MetricsRow> {
        let ep = self.state.episode;
        let cfg = self.state.config.clone();
        let eps_goal = self.epsilon();
        let explore = Exploration::Noisy {
            epsilon: cfg.explore_epsilon(ep),
        };

        let (mut s, g_env) = self.env.reset(derive_seed(cfg.seed, STREAM_TRAIN_ENV, ep));
        let mut trajectory = vec![self.env.achieved_goal(&s)];
        let mut env_success = goal_reward(&trajectory[0], &g_env, eps_goal)?.is_hit();
        let mut segments = 0;
        let mut reached_count = 0;
        let mut r_hi_sum = 0.0;
        let mut step_index = 0;
        let mut last_sub = Vec::new();
        let mut last_reached = false;
        let mut done = false;
        while !done {
            let st = &mut self.state;
            let (g_sub, log_prob) = st.high.select(&s, &g_env, SubgoalMode::Stochastic, &mut st.rng)?;
            let s_hi = s.clone();
            let achieved_at_issue = self.env.achieved_goal(&s_hi);
            let mut reached = false;
            loop {
                let a = st.low.act_explore(&s, &g_sub, explore, &mut st.rng)?;
                let step = self.env.step(&a)?;
                let r = goal_reward(&step.achieved_goal, &g_sub, eps_goal)?;
                let novelty = st.rnd.reward(&step.next_state)?;
                st.rnd_stats.update(novelty);
                env_success |= goal_reward(&step.achieved_goal, &g_env, eps_goal)?.is_hit();
                st.low_buffer.push(GoalTransition {
                    s: s.clone(),
                    a: a.to_vec(),
                    r,
                    s_next: step.next_state.clone(),
                    achieved_next: step.achieved_goal.clone(),
                    g_sub: g_sub.clone(),
                    episode_id: ep,
                    step_index,
                });
                step_index += 1;
                trajectory.push(step.achieved_goal);
                s = step.next_state;
                done = step.done;
                if r.is_hit() {
                    reached = true;
                }
                if reached || done {
                    break;
                }
            }
            let r_hf = st.reward.score(&s_hi, &g_sub, &g_env)?;
            r_hi_sum += high_reward(r_hf, log_prob, cfg.beta)?;
            st.high_buffer.push(HighTransition {
                s_hi,
                g_sub: g_sub.clone(),
                s_end: s.clone(),
                g_env: g_env.clone(),
                r_hi: r_hf,
                achieved_at_issue,
                episode_id: ep,
            });
            segments += 1;
            reached_count += reached as usize;
            last_sub = g_sub;
            last_reached = reached;
        }

        let mut row = MetricsRow {
            episode: ep,
            env_success,
            segments,
            subgoals_reached: reached_count,
            mean_r_hi: r_hi_sum / segments as f64,
            ..Default::default()
        };
        self.train_high(&mut row)?;
        self.train_low(&mut row)?;
        if cfg.feedback_enabled() && (ep + 1) % cfg.query_frequency as u64 == 0 {
            self.feedback_cycle(ep, &mut row)?;
        }
        self.train_distance(&trajectory, &last_sub, last_reached, &mut row)?;

        let rate = self.subgoal_success(cfg.eval_rollouts, derive_seed(cfg.seed, STREAM_SUBGOAL_EVAL, ep))?;
        row.subgoal_success_rate = rate;
        if !cfg.no_ddc {
            let before = self.state.curriculum.k;
            let after = self.state.curriculum.adjust(rate)?;
            self.state.k_events.push(KEvent {
                episode: ep,
                success_rate: rate,
                k_before: before,
                k_after: after,
            });
        }
        self.state.episode += 1;
        if cfg.eval_interval > 0 && self.state.episode % cfg.eval_interval as u64 == 0 {
            let success = self.evaluate(cfg.eval_episodes)?;
            row.eval_success = Some(success);
            self.state.last_eval = Some(success);
            if success == 1.0 && self.state.first_success.is_none() {
                self.state.first_success = Some(self.state.episode);
            }
        }
        row.k = self.state.curriculum.k;
        row.alpha = self.state.dual.alpha;
        row.labels_total = self.state.labels_total;
        row.queries_issued = self.state.queries_issued;
        row.queries_pending = self.state.outstanding.len();
        if let Some(b) = &self.bridge {
            b.status(StatusSnapshot {
                episode: self.state.episode,
                k: row.k,
                alpha: row.alpha,
                subgoal_success_rate: rate,
                labels_total: self.state.labels_total,
                last_eval_success: self.state.last_eval,
            });
        }
        Ok(row)
    }

    fn train_high(&mut self, row: &mut MetricsRow) -> Result<()> {
        let st = &mut self.state;
        let cfg = &st.config;
        if st.high_buffer.len() < cfg.high_batch_size.min(cfg.high_buffer_size) {
            return Ok(());
        }
        let use_ddc = !cfg.no_ddc;
        let (mut critic, mut actor, mut pen, mut gap) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..cfg.high_iterations {
            let idx = st.high_buffer.sample_uniform(cfg.high_batch_size, &mut st.rng)?;
            let batch: Vec<&HighTransition> = idx.iter().map(|i| st.high_buffer.get(*i).expect("sampled")).collect();
            let distance = use_ddc.then_some(&st.distance);
            let losses = st.high.update(&batch, st.dual.alpha, st.curriculum.k, distance, &mut st.rng)?;
            if use_ddc {
                st.dual.update(losses.mean_gap);
            }
            critic += losses.critic;
            actor += losses.actor;
            pen += losses.mean_penalty;
            gap += losses.mean_gap;
        }
        let n = cfg.high_iterations as f64;
        row.high_critic_loss = Some(critic / n);
        row.high_actor_loss = Some(actor / n);
        if use_ddc {
            row.mean_penalty = Some(pen / n);
            row.mean_gap = Some(gap / n);
        }
        Ok(())
    }

    fn train_low(&mut self, row: &mut MetricsRow) -> Result<()> {
        let st = &mut self.state;
        let cfg = &st.config;
        if st.low_buffer.len() < cfg.low_batch_size {
            return Ok(());
        }
        let settings = UpdateSettings {
            batch_size: cfg.low_batch_size,
            hindsight_ratio: cfg.hindsight_ratio,
            epsilon: self.env.spec().epsilon,
            bonus_scale: cfg.rnd_bonus_scale,
        };
        let (mut base, mut explore, mut rnd) = (0.0, 0.0, 0.0);
        for _ in 0..cfg.low_iterations {
            let audit = cfg.audit_decoupling.then_some(&mut st.audit);
            let l = update_low(
                &mut st.low,
                &mut st.rnd,
                &st.rnd_stats,
                &st.low_buffer,
                &settings,
                audit,
                &mut st.rng,
            )?;
            base += l.base;
            explore += l.explore;
            rnd += l.rnd;
        }
        let n = cfg.low_iterations as f64;
        row.low_base_loss = Some(base / n);
        row.low_explore_loss = Some(explore / n);
        row.rnd_loss = Some(rnd / n);
        Ok(())
    }

    fn feedback_cycle(&mut self, ep: u64, row: &mut MetricsRow) -> Result<()> {
        let cfg = self.state.config.clone();
        let queries = {
            let st = &mut self.state;
            generate_queries(
                &st.high_buffer,
                cfg.batch_queries,
                cfg.near_policy_episodes,
                ep,
                &mut st.next_query_id,
                &mut st.rng,
            )
        };
        let queries = match queries {
            Ok(q) => q,
            Err(Error::InsufficientData(m)) => {
                log::debug!("episode {ep}: no queries ({m})");
                Vec::new()
            }
            Err(e) => return Err(e),
        };
        self.state.queries_issued += queries.len() as u64;
        let mut fresh = Vec::new();
        match cfg.labeler {
            LabelerKind::Oracle => {
                for q in queries {
                    let label = oracle_label(&q, &self.env);
                    fresh.push(PreferenceRecord { query: q, label });
                }
            }
            LabelerKind::Human | LabelerKind::Fallback => {
                let bridge = self
                    .bridge
                    .as_ref()
                    .ok_or_else(|| Error::Config("human labeling needs a running annotation service".into()))?;
                let now = Instant::now();
                for q in &queries {
                    self.issued_at.insert(q.id, now);
                    self.state.outstanding.insert(q.id, q.clone());
                }
                bridge.offer(queries);
                for rec in bridge.drain() {
                    if self.state.outstanding.remove(&rec.query.id).is_some() {
                        self.issued_at.remove(&rec.query.id);
                        fresh.push(rec);
                    }
                }
                if cfg.labeler == LabelerKind::Fallback {
                    let expired: Vec<u64> = self
                        .state
                        .outstanding
                        .keys()
                        .filter(|id| {
                            self.issued_at
                                .get(id)
                                .is_none_or(|t| t.elapsed().as_secs_f64() >= cfg.label_timeout_secs)
                        })
                        .copied()
                        .collect();
                    for id in &expired {
                        let q = self.state.outstanding.remove(id).expect("listed");
                        self.issued_at.remove(id);
                        if !cfg.fallback_drop {
                            let label = oracle_label(&q, &self.env);
                            fresh.push(PreferenceRecord { query: q, label });
                        }
                    }
                    if !expired.is_empty() {
                        bridge.resolve(expired);
                    }
                }
            }
        }
        self.state.labels_total += fresh.len() as u64;
        for r in fresh {
            self.state.preferences.push(r);
        }
        if self.state.preferences.is_empty() {
            return Ok(());
        }
        let st = &mut self.state;
        let records = st.preferences.to_vec();
        let loss = st.reward.train_epochs(&records, cfg.reward_epochs, cfg.reward_batch_size, &mut st.rng)?;
        row.reward_loss = Some(loss);
        row.rewritten = self.rewrite_high()?;
        Ok(())
    }

    /// Replaces every stored high-level reward with the current reward
    /// model's score.
    pub fn rewrite_high(&mut self) -> Result<usize> {
        let st = &mut self.state;
        let window = (st.config.rewrite_window > 0).then_some(st.config.rewrite_window);
        let reward = &st.reward;
        rewrite_high_rewards(&mut st.high_buffer, window, |items| {
            items.iter().map(|t| reward.score(&t.s_hi, &t.g_sub, &t.g_env)).collect()
        })
    }

    fn train_distance(&mut self, trajectory: &[Vec<f64>], g_sub: &[f64], reached: bool, row: &mut MetricsRow) -> Result<()> {
        let st = &mut self.state;
        let cfg = &st.config;
        let pairs = build_distance_batch(
            trajectory,
            g_sub,
            reached,
            cfg.distance_within_pairs,
            cfg.distance_augment_pairs,
            &mut st.rng,
        )?;
        st.distance_pairs.extend(pairs);
        if cfg.distance_iterations == 0 {
            return Ok(());
        }
        let mut total = 0.0;
        for _ in 0..cfg.distance_iterations {
            let batch = st.distance_pairs.sample(cfg.distance_batch_size, &mut st.rng);
            total += st.distance.train(&batch)?;
        }
        row.distance_loss = Some(total / cfg.distance_iterations as f64);
        Ok(())
    }

    /// Fraction of `n` rollouts in which the greedy base policy reaches a
    /// subgoal sampled from the high level at the initial state.
    pub fn subgoal_success(&self, n: usize, seed: u64) -> Result<f64> {
        if n == 0 {
            return Err(Error::InvalidArgument("subgoal-success evaluation needs at least one rollout".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut env = self.env.clone();
        let eps = self.epsilon();
        let mut hits = 0;
        for _ in 0..n {
            let (mut s, g_env) = env.reset(rng.random());
            let (g_sub, _) = self.state.high.select(&s, &g_env, SubgoalMode::Stochastic, &mut rng)?;
            loop {
                let a = self.state.low.act_base(&s, &g_sub, Exploration::Greedy, &mut rng)?;
                let step = env.step(&a)?;
                s = step.next_state;
                if goal_reward(&step.achieved_goal, &g_sub, eps)?.is_hit() {
                    hits += 1;
                    break;
                }
                if step.done {
                    break;
                }
            }
        }
        Ok(hits as f64 / n as f64)
    }

    /// Greedy high level and greedy base policy; success means the
    /// environment goal was touched within the horizon.
    pub fn evaluate(&self, episodes: usize) -> Result<f64> {
        if episodes == 0 {
            return Err(Error::InvalidArgument("evaluation needs at least one episode".into()));
        }
        let mut env = self.env.clone();
        let eps = self.epsilon();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut wins = 0;
        for i in 0..episodes {
            let (mut s, g_env) = env.reset(derive_seed(self.state.config.seed, STREAM_ENV_EVAL, i as u64));
            let mut success = goal_reward(&env.achieved_goal(&s), &g_env, eps)?.is_hit();
            let mut done = false;
            while !done && !success {
                let (g_sub, _) = self.state.high.select(&s, &g_env, SubgoalMode::Greedy, &mut rng)?;
                loop {
                    let a = self.state.low.act_base(&s, &g_sub, Exploration::Greedy, &mut rng)?;
                    let step = env.step(&a)?;
                    s = step.next_state;
                    done = step.done;
                    if goal_reward(&step.achieved_goal, &g_env, eps)?.is_hit() {
                        success = true;
                        break;
                    }
                    if done || goal_reward(&step.achieved_goal, &g_sub, eps)?.is_hit() {
                        break;
                    }
                }
            }
            wins += success as usize;
        }
        Ok(wins as f64 / episodes as f64)
    }
}
