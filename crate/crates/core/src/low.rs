//! Goal-conditioned low-level control with decoupled exploration.
//!
//! [`DualPolicy`] holds a base policy and an exploration policy that share
//! one replay buffer. Each update iteration trains the RND predictor,
//! relabels the batch in hindsight, updates the base policy on the sparse
//! goal reward alone, adds the normalized novelty bonus, and updates the
//! exploration policy on the sum. The base update only accepts
//! [`SparseReward`] values, so it cannot see the bonus.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::approx::{soft_update, Activation, Adam, Mlp};
use crate::env::{Action, ActionSpace, SparseReward};
use crate::error::{Error, Result};
use crate::replay::{sample_low_hindsight, HindsightSample, LowBuffer};
use crate::rnd::{RndPair, RunningStats};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowConfig {
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    /// Gaussian exploration noise (continuous actions), as a fraction of the half range.
    pub action_noise: f64,
    pub target_noise: f64,
    pub target_noise_clip: f64,
}

/// How an acting policy perturbs its greedy choice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Exploration {
    Greedy,
    /// ε-greedy for discrete actions, Gaussian noise with the configured
    /// scale for continuous ones.
    Noisy { epsilon: f64 },
}

/// A training batch in matrix form.
#[derive(Clone, Debug)]
pub struct LowBatch {
    pub s: Array2<f64>,
    pub a: Vec<Vec<f64>>,
    pub s_next: Array2<f64>,
    pub g: Array2<f64>,
    /// The relabeled sparse reward also marks terminal transitions.
    pub r: Vec<SparseReward>,
}

impl LowBatch {
    pub fn from_samples(samples: &[HindsightSample]) -> Self {
        let rows = |f: &dyn Fn(&HindsightSample) -> &Vec<f64>| {
            let n = samples.len();
            let c = samples.first().map_or(0, |x| f(x).len());
            let mut m = Array2::zeros((n, c));
            for (i, x) in samples.iter().enumerate() {
                m.row_mut(i).iter_mut().zip(f(x)).for_each(|(o, v)| *o = *v);
            }
            m
        };
        Self {
            s: rows(&|x| &x.transition.s),
            s_next: rows(&|x| &x.transition.s_next),
            g: rows(&|x| &x.transition.g_sub),
            a: samples.iter().map(|x| x.transition.a.clone()).collect(),
            r: samples.iter().map(|x| x.transition.r).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }
}

fn hstack(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), a.ncols() + b.ncols()));
    out.slice_mut(s![.., ..a.ncols()]).assign(&a);
    out.slice_mut(s![.., a.ncols()..]).assign(&b);
    out
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub const SPARSE_VALUE_BOUNDS: (f64, f64) = (0.0, 1.0);

fn clamp_target(y: f64, bounds: Option<(f64, f64)>) -> f64 {
    match bounds {
        Some((lo, hi)) => y.clamp(lo, hi),
        None => y,
    }
}

/// Double Q-learning over a discrete action set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QAgent {
    q: Mlp,
    q_target: Mlp,
    opt: Adam,
    n_actions: usize,
    gamma: f64,
    tau: f64,
}

impl QAgent {
    pub fn new(obs_dim: usize, n_actions: usize, cfg: &LowConfig, seed: u64) -> Result<Self> {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(n_actions);
        let q = Mlp::init(&sizes, Activation::Relu, Activation::Identity, seed)?;
        Ok(Self {
            opt: Adam::for_net(cfg.critic_lr, &q),
            q_target: q.clone(),
            q,
            n_actions,
            gamma: cfg.gamma,
            tau: cfg.tau,
        })
    }

    pub fn q(&self) -> &Mlp {
        &self.q
    }

    pub fn q_mut(&mut self) -> &mut Mlp {
        &mut self.q
    }

    pub fn q_values(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.q.forward(obs)
    }

    pub fn act<R: Rng + ?Sized>(&self, obs: &[f64], mode: Exploration, rng: &mut R) -> Result<usize> {
        if let Exploration::Noisy { epsilon } = mode {
            if rng.random::<f64>() < epsilon {
                return Ok(rng.random_range(0..self.n_actions));
            }
        }
        Ok(argmax(&self.q_values(obs)?))
    }

    /// Bootstrapped targets `r + γ·(1 − done)·Q_target(s′, argmax_a Q(s′, a))`,
    /// clamped to `bounds` when given.
    pub fn targets(&self, batch: &LowBatch, rewards: &[f64], bounds: Option<(f64, f64)>) -> Result<Vec<f64>> {
        let next = hstack(batch.s_next.view(), batch.g.view());
        let q_online = self.q.forward_batch(next.view())?;
        let q_target = self.q_target.forward_batch(next.view())?;
        Ok((0..batch.len())
            .map(|i| {
                if batch.r[i].is_hit() {
                    rewards[i]
                } else {
                    let a = argmax(q_online.row(i).as_slice().expect("row-major"));
                    clamp_target(rewards[i] + self.gamma * q_target[[i, a]], bounds)
                }
            })
            .collect())
    }

    /// `½ · mean (Q(s, a) − y)²` and its gradient.
    pub fn loss_and_grad(&self, batch: &LowBatch, targets: &[f64]) -> Result<(f64, Vec<f64>)> {
        let x = hstack(batch.s.view(), batch.g.view());
        let trace = self.q.forward_trace(x.view())?;
        let out = trace.output();
        let n = batch.len() as f64;
        let mut grad = Array2::zeros(out.dim());
        let mut loss = 0.0;
        for i in 0..batch.len() {
            let a = batch.a[i][0] as usize;
            if a >= self.n_actions {
                return Err(Error::InvalidAction(format!("stored action {a}")));
            }
            let e = out[[i, a]] - targets[i];
            loss += 0.5 * e * e / n;
            grad[[i, a]] = e / n;
        }
        Ok((loss, self.q.backward(&trace, grad.view()).params))
    }

    pub fn update(&mut self, batch: &LowBatch, rewards: &[f64], bounds: Option<(f64, f64)>) -> Result<f64> {
        let y = self.targets(batch, rewards, bounds)?;
        let (loss, grad) = self.loss_and_grad(batch, &y)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("Q loss".into()));
        }
        self.q.apply_gradient(&mut self.opt, &grad)?;
        soft_update(&mut self.q_target, &self.q, self.tau)?;
        Ok(loss)
    }
}

/// Deterministic actor with a critic and smoothed target actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorCritic {
    actor: Mlp,
    actor_target: Mlp,
    critic: Mlp,
    critic_target: Mlp,
    actor_opt: Adam,
    critic_opt: Adam,
    low: f64,
    high: f64,
    cfg: LowConfig,
}

impl ActorCritic {
    pub fn new(obs_dim: usize, act_dim: usize, low: f64, high: f64, cfg: &LowConfig, seed: u64) -> Result<Self> {
        let mut a_sizes = vec![obs_dim];
        a_sizes.extend_from_slice(&cfg.hidden);
        a_sizes.push(act_dim);
        let mut c_sizes = vec![obs_dim + act_dim];
        c_sizes.extend_from_slice(&cfg.hidden);
        c_sizes.push(1);
        let actor = Mlp::init(&a_sizes, Activation::Relu, Activation::Tanh, seed)?;
        let critic = Mlp::init(&c_sizes, Activation::Relu, Activation::Identity, seed.wrapping_add(1))?;
        Ok(Self {
            actor_opt: Adam::for_net(cfg.actor_lr, &actor),
            critic_opt: Adam::for_net(cfg.critic_lr, &critic),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            low,
            high,
            cfg: cfg.clone(),
        })
    }

    pub fn actor(&self) -> &Mlp {
        &self.actor
    }

    pub fn critic(&self) -> &Mlp {
        &self.critic
    }

    fn scale(&self, u: f64) -> f64 {
        let c = 0.5 * (self.low + self.high);
        let h = 0.5 * (self.high - self.low);
        c + h * u
    }

    pub fn act<R: Rng + ?Sized>(&self, obs: &[f64], mode: Exploration, rng: &mut R) -> Result<Vec<f64>> {
        let u = self.actor.forward(obs)?;
        Ok(u.iter()
            .map(|&x| {
                let x = match mode {
                    Exploration::Greedy => x,
                    Exploration::Noisy { .. } => x + self.cfg.action_noise * rng.sample::<f64, _>(StandardNormal),
                };
                self.scale(x.clamp(-1.0, 1.0))
            })
            .collect())
    }

    fn unscale(&self, a: &[f64]) -> Vec<f64> {
        let c = 0.5 * (self.low + self.high);
        let h = 0.5 * (self.high - self.low);
        a.iter().map(|v| (v - c) / h).collect()
    }

    pub fn update<R: Rng + ?Sized>(
        &mut self,
        batch: &LowBatch,
        rewards: &[f64],
        bounds: Option<(f64, f64)>,
        rng: &mut R,
    ) -> Result<f64> {
        let n = batch.len();
        let obs = hstack(batch.s.view(), batch.g.view());
        let next = hstack(batch.s_next.view(), batch.g.view());
        let mut a_next = self.actor_target.forward_batch(next.view())?;
        a_next.mapv_inplace(|u| {
            let eps: f64 = rng.sample(StandardNormal);
            let eps = (self.cfg.target_noise * eps).clamp(-self.cfg.target_noise_clip, self.cfg.target_noise_clip);
            (u + eps).clamp(-1.0, 1.0)
        });
        let q_next = self.critic_target.forward_batch(hstack(next.view(), a_next.view()).view())?;
        let y: Vec<f64> = (0..n)
            .map(|i| {
                if batch.r[i].is_hit() {
                    rewards[i]
                } else {
                    clamp_target(rewards[i] + self.cfg.gamma * q_next[[i, 0]], bounds)
                }
            })
            .collect();
        let act_dim = self.actor.output_dim();
        let mut a = Array2::zeros((n, act_dim));
        for (i, row) in batch.a.iter().enumerate() {
            a.row_mut(i).iter_mut().zip(self.unscale(row)).for_each(|(o, v)| *o = v);
        }
        let ctrace = self.critic.forward_trace(hstack(obs.view(), a.view()).view())?;
        let mut cg = Array2::zeros((n, 1));
        let mut loss = 0.0;
        for i in 0..n {
            let e = ctrace.output()[[i, 0]] - y[i];
            loss += 0.5 * e * e / n as f64;
            cg[[i, 0]] = e / n as f64;
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("critic loss".into()));
        }
        let grads = self.critic.backward(&ctrace, cg.view()).params;
        self.critic.apply_gradient(&mut self.critic_opt, &grads)?;

        let atrace = self.actor.forward_trace(obs.view())?;
        let ctrace = self.critic.forward_trace(hstack(obs.view(), atrace.output().view()).view())?;
        let ones = Array2::from_elem((n, 1), -1.0 / n as f64);
        let dq_da = self.critic.backward(&ctrace, ones.view()).input.slice(s![.., obs.ncols()..]).to_owned();
        let agrad = self.actor.backward(&atrace, dq_da.view()).params;
        self.actor.apply_gradient(&mut self.actor_opt, &agrad)?;
        soft_update(&mut self.critic_target, &self.critic, self.cfg.tau)?;
        soft_update(&mut self.actor_target, &self.actor, self.cfg.tau)?;
        Ok(loss)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LowAgent {
    Discrete(QAgent),
    Continuous(ActorCritic),
}

impl LowAgent {
    pub fn new(obs_dim: usize, space: &ActionSpace, cfg: &LowConfig, seed: u64) -> Result<Self> {
        Ok(match space {
            ActionSpace::Discrete(n) => LowAgent::Discrete(QAgent::new(obs_dim, *n, cfg, seed)?),
            ActionSpace::Box { dim, low, high } => {
                LowAgent::Continuous(ActorCritic::new(obs_dim, *dim, *low, *high, cfg, seed)?)
            }
        })
    }

    pub fn act<R: Rng + ?Sized>(&self, s: &[f64], g: &[f64], mode: Exploration, rng: &mut R) -> Result<Action> {
        let obs: Vec<f64> = s.iter().chain(g).copied().collect();
        Ok(match self {
            LowAgent::Discrete(q) => Action::Discrete(q.act(&obs, mode, rng)?),
            LowAgent::Continuous(ac) => Action::Continuous(ac.act(&obs, mode, rng)?),
        })
    }

    fn update<R: Rng + ?Sized>(
        &mut self,
        batch: &LowBatch,
        rewards: &[f64],
        bounds: Option<(f64, f64)>,
        rng: &mut R,
    ) -> Result<f64> {
        match self {
            LowAgent::Discrete(q) => q.update(batch, rewards, bounds),
            LowAgent::Continuous(ac) => ac.update(batch, rewards, bounds, rng),
        }
    }
}

/// Counters for the reward streams fed to the two policies.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecouplingAudit {
    pub batches: u64,
    pub samples: u64,
    /// Base-update rewards outside `{0, 1}`.
    pub base_violations: u64,
    /// Exploration rewards differing from `base + bonus`.
    pub sum_mismatches: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LowLosses {
    pub rnd: f64,
    pub base: f64,
    pub explore: f64,
    pub mean_bonus: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateSettings {
    pub batch_size: usize,
    pub hindsight_ratio: f64,
    pub epsilon: f64,
    pub bonus_scale: f64,
}

/// Base and exploration policies. Without decoupling there is a single
/// policy that both acts and learns from the combined reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualPolicy {
    base: LowAgent,
    explore: Option<LowAgent>,
}

impl DualPolicy {
    pub fn new(obs_dim: usize, space: &ActionSpace, cfg: &LowConfig, decoupled: bool, seed: u64) -> Result<Self> {
        let base = LowAgent::new(obs_dim, space, cfg, seed)?;
        let explore = if decoupled {
            Some(LowAgent::new(obs_dim, space, cfg, seed.wrapping_add(100))?)
        } else {
            None
        };
        Ok(Self { base, explore })
    }

    pub fn is_decoupled(&self) -> bool {
        self.explore.is_some()
    }

    pub fn base(&self) -> &LowAgent {
        &self.base
    }

    pub fn base_mut(&mut self) -> &mut LowAgent {
        &mut self.base
    }

    pub fn explore(&self) -> &LowAgent {
        self.explore.as_ref().unwrap_or(&self.base)
    }

    pub fn act_explore<R: Rng + ?Sized>(&self, s: &[f64], g: &[f64], mode: Exploration, rng: &mut R) -> Result<Action> {
        self.explore().act(s, g, mode, rng)
    }

    pub fn act_base<R: Rng + ?Sized>(&self, s: &[f64], g: &[f64], mode: Exploration, rng: &mut R) -> Result<Action> {
        self.base.act(s, g, mode, rng)
    }

    /// Base-policy step on sparse goal rewards only. A hit ends the return,
    /// so values lie in `[0, 1]` and targets are clamped there.
    pub fn update_base<R: Rng + ?Sized>(&mut self, batch: &LowBatch, rewards: &[SparseReward], rng: &mut R) -> Result<f64> {
        let r: Vec<f64> = rewards.iter().map(|r| r.value()).collect();
        self.base.update(batch, &r, Some(SPARSE_VALUE_BOUNDS), rng)
    }

    fn update_explore<R: Rng + ?Sized>(&mut self, batch: &LowBatch, rewards: &[f64], rng: &mut R) -> Result<f64> {
        match self.explore.as_mut() {
            Some(e) => e.update(batch, rewards, None, rng),
            None => self.base.update(batch, rewards, None, rng),
        }
    }
}

/// Normalized novelty bonus for each next state of the batch.
pub fn intrinsic_bonus(rnd: &RndPair, stats: &RunningStats, s_next: ArrayView2<'_, f64>, scale: f64) -> Result<Vec<f64>> {
    Ok(rnd
        .reward_batch(s_next)?
        .into_iter()
        .map(|r| scale * stats.normalize(r))
        .collect())
}

/// One iteration of the low-level update. See the module docs for the order.
#[allow(clippy::too_many_arguments)]
pub fn update_low<R: Rng + ?Sized>(
    policy: &mut DualPolicy,
    rnd: &mut RndPair,
    stats: &RunningStats,
    buffer: &LowBuffer,
    settings: &UpdateSettings,
    audit: Option<&mut DecouplingAudit>,
    rng: &mut R,
) -> Result<LowLosses> {
    if buffer.len() < settings.batch_size || settings.batch_size == 0 {
        return Err(Error::InsufficientData(format!(
            "low-level buffer holds {} transitions, batch needs {}",
            buffer.len(),
            settings.batch_size
        )));
    }
    let idx = buffer.sample_uniform(settings.batch_size, rng)?;
    let states = {
        let mut m = Array2::zeros((idx.len(), buffer.get(idx[0]).expect("sampled").s_next.len()));
        for (i, seq) in idx.iter().enumerate() {
            let t = buffer.get(*seq).expect("sampled");
            m.row_mut(i).iter_mut().zip(&t.s_next).for_each(|(o, v)| *o = *v);
        }
        m
    };
    let rnd_loss = rnd.train(states.view())?;

    let samples = crate::replay::relabel_future(buffer, &idx, settings.hindsight_ratio, settings.epsilon, rng)?;
    let batch = LowBatch::from_samples(&samples);
    let base_rewards: Vec<SparseReward> = batch.r.clone();

    let base_loss = if policy.is_decoupled() {
        policy.update_base(&batch, &base_rewards, rng)?
    } else {
        f64::NAN
    };

    let bonus = intrinsic_bonus(rnd, stats, batch.s_next.view(), settings.bonus_scale)?;
    let combined: Vec<f64> = base_rewards.iter().zip(&bonus).map(|(r, b)| r.value() + b).collect();
    let explore_loss = policy.update_explore(&batch, &combined, rng)?;

    if let Some(a) = audit {
        a.batches += 1;
        a.samples += batch.len() as u64;
        a.base_violations += base_rewards
            .iter()
            .filter(|r| r.value() != 0.0 && r.value() != 1.0)
            .count() as u64;
        a.sum_mismatches += combined
            .iter()
            .zip(base_rewards.iter().zip(&bonus))
            .filter(|(c, (r, b))| **c != r.value() + **b)
            .count() as u64;
    }
    Ok(LowLosses {
        rnd: rnd_loss,
        base: if policy.is_decoupled() { base_loss } else { explore_loss },
        explore: explore_loss,
        mean_bonus: bonus.iter().sum::<f64>() / bonus.len() as f64,
    })
}

/// Uniform hindsight batch, exposed for diagnostics.
pub fn hindsight_batch<R: Rng + ?Sized>(
    buffer: &LowBuffer,
    settings: &UpdateSettings,
    rng: &mut R,
) -> Result<LowBatch> {
    let samples = sample_low_hindsight(buffer, settings.batch_size, settings.hindsight_ratio, settings.epsilon, rng)?;
    Ok(LowBatch::from_samples(&samples))
}
