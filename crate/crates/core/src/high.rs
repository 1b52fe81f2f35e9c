//! High-level subgoal policy under a learned distance constraint.
//!
//! The actor is a diagonal Gaussian squashed by `tanh` into the goal box. The
//! critic `Q(s, g_env, g_sub)` regresses the stored reward plus the discounted
//! soft value at the segment end, `γ·(Q_targ(s_end, g') − β·log π(g'))` with
//! `g'` drawn from the current actor, so the entropy bonus enters once per
//! decision even though stored rewards hold `r_hf` alone. The actor minimizes
//!
//! ```text
//! mean[ β·log π(g | s, g_env) − Q(s, g_env, g) + α·max(d(g_ach, g) − k, 0) ]
//! ```
//!
//! with `g` reparameterized, differentiating through both the critic and the
//! distance model.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::approx::{soft_update, Activation, Adam, Mlp};
use crate::distance::DistanceModel;
use crate::error::{Error, Result};
use crate::replay::HighTransition;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;
/// Keeps the squash Jacobian away from zero.
const SQUASH_EPS: f64 = 1e-6;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

pub fn penalty(d: f64, k: f64) -> f64 {
    (d - k).max(0.0)
}

/// `r_hf − β·log π`.
pub fn high_reward(r_hf: f64, log_prob: f64, beta: f64) -> Result<f64> {
    if !log_prob.is_finite() {
        return Err(Error::NonFinite("subgoal log-density".into()));
    }
    Ok(r_hf - beta * log_prob)
}

/// Axis-aligned goal box `center ± half`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalBox {
    pub center: Vec<f64>,
    pub half: Vec<f64>,
}

impl GoalBox {
    pub fn new(low: &[f64], high: &[f64]) -> Result<Self> {
        if low.len() != high.len() || low.iter().zip(high).any(|(l, h)| !(h > l)) {
            return Err(Error::InvalidArgument("goal box needs low < high per axis".into()));
        }
        Ok(Self {
            center: low.iter().zip(high).map(|(l, h)| 0.5 * (l + h)).collect(),
            half: low.iter().zip(high).map(|(l, h)| 0.5 * (h - l)).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn contains(&self, g: &[f64]) -> bool {
        g.iter()
            .zip(self.center.iter().zip(&self.half))
            .all(|(v, (c, h))| (v - c).abs() <= *h)
    }
}

fn log_std_of(raw: f64) -> f64 {
    LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (raw.tanh() + 1.0)
}

fn log_std_slope(raw: f64) -> f64 {
    let t = raw.tanh();
    0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (1.0 - t * t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubgoalMode {
    Stochastic,
    Greedy,
}

/// Everything the actor objective touched, for diagnostics and the dual step.
#[derive(Clone, Debug, PartialEq)]
pub struct ActorEval {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// `mean(d − k)` at the sampled subgoals (zero without a distance model).
    pub mean_gap: f64,
    pub mean_penalty: f64,
    pub mean_log_prob: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HighLosses {
    pub critic: f64,
    pub actor: f64,
    pub mean_gap: f64,
    pub mean_penalty: f64,
    pub mean_log_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HighPolicy {
    actor: Mlp,
    critic: Mlp,
    critic_target: Mlp,
    actor_opt: Adam,
    critic_opt: Adam,
    goal_box: GoalBox,
    state_dim: usize,
    pub gamma: f64,
    pub tau: f64,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HighConfig {
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub beta: f64,
}

impl HighPolicy {
    pub fn new(state_dim: usize, goal_box: GoalBox, cfg: &HighConfig, seed: u64) -> Result<Self> {
        let gd = goal_box.dim();
        let mut actor_sizes = vec![state_dim + gd];
        actor_sizes.extend_from_slice(&cfg.hidden);
        actor_sizes.push(2 * gd);
        let mut critic_sizes = vec![state_dim + 2 * gd];
        critic_sizes.extend_from_slice(&cfg.hidden);
        critic_sizes.push(1);
        let mut actor = Mlp::init(&actor_sizes, Activation::Relu, Activation::Identity, seed)?;
        actor.scale_output_layer(0.1);
        let critic = Mlp::init(&critic_sizes, Activation::Relu, Activation::Identity, seed.wrapping_add(1))?;
        Ok(Self {
            actor_opt: Adam::for_net(cfg.actor_lr, &actor),
            critic_opt: Adam::for_net(cfg.critic_lr, &critic),
            critic_target: critic.clone(),
            actor,
            critic,
            goal_box,
            state_dim,
            gamma: cfg.gamma,
            tau: cfg.tau,
            beta: cfg.beta,
        })
    }

    pub fn actor(&self) -> &Mlp {
        &self.actor
    }

    pub fn actor_mut(&mut self) -> &mut Mlp {
        &mut self.actor
    }

    pub fn critic(&self) -> &Mlp {
        &self.critic
    }

    pub fn critic_mut(&mut self) -> &mut Mlp {
        &mut self.critic
    }

    pub fn critic_target(&self) -> &Mlp {
        &self.critic_target
    }

    pub fn goal_box(&self) -> &GoalBox {
        &self.goal_box
    }

    fn gd(&self) -> usize {
        self.goal_box.dim()
    }

    fn obs(&self, s: &[f64], g_env: &[f64]) -> Result<Vec<f64>> {
        if s.len() != self.state_dim || g_env.len() != self.gd() {
            return Err(Error::DimensionMismatch {
                expected: self.state_dim + self.gd(),
                got: s.len() + g_env.len(),
            });
        }
        Ok(s.iter().chain(g_env).copied().collect())
    }

    /// Pre-squash mean and log standard deviation.
    fn head(&self, out: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let gd = self.gd();
        (out[..gd].to_vec(), out[gd..].iter().map(|r| log_std_of(*r)).collect())
    }

    fn squash(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.goal_box.center.iter().zip(&self.goal_box.half))
            .map(|(z, (c, h))| c + h * z.tanh())
            .collect()
    }

    /// Subgoal and its log-density under the current actor.
    pub fn select<R: Rng + ?Sized>(
        &self,
        s: &[f64],
        g_env: &[f64],
        mode: SubgoalMode,
        rng: &mut R,
    ) -> Result<(Vec<f64>, f64)> {
        let out = self.actor.forward(&self.obs(s, g_env)?)?;
        let (mu, ls) = self.head(&out);
        let xi: Vec<f64> = match mode {
            SubgoalMode::Stochastic => (0..self.gd()).map(|_| rng.sample(StandardNormal)).collect(),
            SubgoalMode::Greedy => vec![0.0; self.gd()],
        };
        let z: Vec<f64> = mu.iter().zip(&ls).zip(&xi).map(|((m, l), x)| m + l.exp() * x).collect();
        let g = self.squash(&z);
        let lp = self.log_prob_parts(&z, &ls, &xi);
        Ok((g, lp))
    }

    fn log_prob_parts(&self, z: &[f64], ls: &[f64], xi: &[f64]) -> f64 {
        let mut lp = 0.0;
        for i in 0..z.len() {
            let y = z[i].tanh();
            let jac = self.goal_box.half[i] * (1.0 - y * y) + SQUASH_EPS;
            lp += -0.5 * xi[i] * xi[i] - ls[i] - 0.5 * LN_2PI - jac.ln();
        }
        lp
    }

    /// Log-density of an arbitrary subgoal.
    pub fn log_prob(&self, s: &[f64], g_env: &[f64], g: &[f64]) -> Result<f64> {
        let out = self.actor.forward(&self.obs(s, g_env)?)?;
        Ok(self.log_prob_from_output(&out, g))
    }

    fn log_prob_from_output(&self, out: &[f64], g: &[f64]) -> f64 {
        let (mu, ls) = self.head(out);
        let lim = 1.0 - 1e-9;
        let mut z = Vec::with_capacity(g.len());
        let mut xi = Vec::with_capacity(g.len());
        for i in 0..g.len() {
            let y = ((g[i] - self.goal_box.center[i]) / self.goal_box.half[i]).clamp(-lim, lim);
            let zi = y.atanh();
            xi.push((zi - mu[i]) / ls[i].exp());
            z.push(zi);
        }
        self.log_prob_parts(&z, &ls, &xi)
    }

    /// Log-densities of the stored subgoals of many transitions.
    pub fn log_prob_batch(&self, items: &[&HighTransition]) -> Result<Vec<f64>> {
        let obs = self.obs_matrix(items.iter().map(|t| (&t.s_hi[..], &t.g_env[..])))?;
        let out = self.actor.forward_batch(obs.view())?;
        Ok(items
            .iter()
            .enumerate()
            .map(|(i, t)| self.log_prob_from_output(out.row(i).as_slice().expect("row-major"), &t.g_sub))
            .collect())
    }

    fn obs_matrix<'a>(&self, rows: impl ExactSizeIterator<Item = (&'a [f64], &'a [f64])>) -> Result<Array2<f64>> {
        let n = rows.len();
        let mut x = Array2::zeros((n, self.state_dim + self.gd()));
        for (i, (s, g)) in rows.enumerate() {
            let v = self.obs(s, g)?;
            x.row_mut(i).iter_mut().zip(v).for_each(|(o, v)| *o = v);
        }
        Ok(x)
    }

    pub fn q_value(&self, s: &[f64], g_env: &[f64], g_sub: &[f64]) -> Result<f64> {
        let x: Vec<f64> = self.obs(s, g_env)?.into_iter().chain(g_sub.iter().copied()).collect();
        Ok(self.critic.forward(&x)?[0])
    }

    /// Actor objective at explicit noise `xi` (one row per sample).
    ///
    /// `obs` rows are `s ‖ g_env`, `g_ach` rows the achieved goal at issue.
    pub fn actor_objective(
        &self,
        obs: ArrayView2<'_, f64>,
        g_ach: ArrayView2<'_, f64>,
        xi: ArrayView2<'_, f64>,
        alpha: f64,
        k: f64,
        distance: Option<&DistanceModel>,
    ) -> Result<ActorEval> {
        let n = obs.nrows();
        if n == 0 {
            return Err(Error::InsufficientData("high-level batch is empty".into()));
        }
        let gd = self.gd();
        let nf = n as f64;
        let trace = self.actor.forward_trace(obs)?;
        let out = trace.output();
        let mut z = Array2::zeros((n, gd));
        let mut y = Array2::zeros((n, gd));
        let mut g = Array2::zeros((n, gd));
        let mut loss = 0.0;
        let mut lp_sum = 0.0;
        for i in 0..n {
            let row: Vec<f64> = out.row(i).to_vec();
            let (mu, ls) = self.head(&row);
            let xr: Vec<f64> = xi.row(i).to_vec();
            for j in 0..gd {
                z[[i, j]] = mu[j] + ls[j].exp() * xr[j];
                y[[i, j]] = z[[i, j]].tanh();
                g[[i, j]] = self.goal_box.center[j] + self.goal_box.half[j] * y[[i, j]];
            }
            let lp = self.log_prob_parts(z.row(i).as_slice().expect("row-major"), &ls, &xr);
            lp_sum += lp;
            loss += self.beta * lp / nf;
        }

        // critic value and its gradient with respect to the subgoal
        let mut cx = Array2::zeros((n, obs.ncols() + gd));
        cx.slice_mut(s![.., ..obs.ncols()]).assign(&obs);
        cx.slice_mut(s![.., obs.ncols()..]).assign(&g);
        let ctrace = self.critic.forward_trace(cx.view())?;
        let ones = Array2::ones((n, 1));
        let cgrad = self.critic.backward(&ctrace, ones.view()).input;
        let dq_dg = cgrad.slice(s![.., obs.ncols()..]).to_owned();
        for i in 0..n {
            loss -= ctrace.output()[[i, 0]] / nf;
        }

        let mut dpen_dg = Array2::<f64>::zeros((n, gd));
        let (mut gap_sum, mut pen_sum) = (0.0, 0.0);
        if let Some(dm) = distance {
            let mut dx = Array2::zeros((n, 2 * gd));
            dx.slice_mut(s![.., ..gd]).assign(&g_ach);
            dx.slice_mut(s![.., gd..]).assign(&g);
            let (d, dd_dg) = dm.predict_with_target_grad(dx.view())?;
            for i in 0..n {
                gap_sum += d[i] - k;
                let p = penalty(d[i], k);
                pen_sum += p;
                loss += alpha * p / nf;
                if d[i] > k {
                    for j in 0..gd {
                        dpen_dg[[i, j]] = alpha * dd_dg[[i, j]];
                    }
                }
            }
        }

        let mut grad_out = Array2::zeros(out.dim());
        for i in 0..n {
            for j in 0..gd {
                let yy = y[[i, j]];
                let h = self.goal_box.half[j];
                let dg_dz = h * (1.0 - yy * yy);
                let dlp_dz = 2.0 * yy * dg_dz / (dg_dz + SQUASH_EPS);
                let dl_dz = (self.beta * dlp_dz + (dpen_dg[[i, j]] - dq_dg[[i, j]]) * dg_dz) / nf;
                let raw = out[[i, gd + j]];
                let std = log_std_of(raw).exp();
                let dl_dls = dl_dz * std * xi[[i, j]] - self.beta / nf;
                grad_out[[i, j]] = dl_dz;
                grad_out[[i, gd + j]] = dl_dls * log_std_slope(raw);
            }
        }
        let grad = self.actor.backward(&trace, grad_out.view()).params;
        Ok(ActorEval {
            loss,
            grad,
            mean_gap: if distance.is_some() { gap_sum / nf } else { 0.0 },
            mean_penalty: pen_sum / nf,
            mean_log_prob: lp_sum / nf,
        })
    }

    /// Critic regression inputs and soft bootstrapped targets for a batch.
    pub fn critic_targets<R: Rng + ?Sized>(&self, batch: &[&HighTransition], rng: &mut R) -> Result<(Array2<f64>, Vec<f64>)> {
        let gd = self.gd();
        let n = batch.len();
        let mut x = Array2::zeros((n, self.state_dim + 2 * gd));
        let mut xn = Array2::zeros((n, self.state_dim + 2 * gd));
        let mut lp_next = Vec::with_capacity(n);
        for (i, t) in batch.iter().enumerate() {
            let row: Vec<f64> = self.obs(&t.s_hi, &t.g_env)?.into_iter().chain(t.g_sub.iter().copied()).collect();
            x.row_mut(i).iter_mut().zip(row).for_each(|(o, v)| *o = v);
            let (g_next, lp) = self.select(&t.s_end, &t.g_env, SubgoalMode::Stochastic, rng)?;
            lp_next.push(lp);
            let row: Vec<f64> = self.obs(&t.s_end, &t.g_env)?.into_iter().chain(g_next).collect();
            xn.row_mut(i).iter_mut().zip(row).for_each(|(o, v)| *o = v);
        }
        let q_next = self.critic_target.forward_batch(xn.view())?;
        let targets = batch
            .iter()
            .enumerate()
            .map(|(i, t)| t.r_hi + self.gamma * (q_next[[i, 0]] - self.beta * lp_next[i]))
            .collect();
        Ok((x, targets))
    }

    /// `½ · mean (Q − y)²` and its gradient.
    pub fn critic_loss_and_grad(&self, x: ArrayView2<'_, f64>, targets: &[f64]) -> Result<(f64, Vec<f64>)> {
        let trace = self.critic.forward_trace(x)?;
        let n = targets.len() as f64;
        let mut grad = Array2::zeros((targets.len(), 1));
        let mut loss = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let e = trace.output()[[i, 0]] - t;
            loss += 0.5 * e * e / n;
            grad[[i, 0]] = e / n;
        }
        Ok((loss, self.critic.backward(&trace, grad.view()).params))
    }

    /// One critic step, one actor step and a target update.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        batch: &[&HighTransition],
        alpha: f64,
        k: f64,
        distance: Option<&DistanceModel>,
        rng: &mut R,
    ) -> Result<HighLosses> {
        if batch.is_empty() {
            return Err(Error::InsufficientData("high-level batch is empty".into()));
        }
        let (x, targets) = self.critic_targets(batch, rng)?;
        let (critic_loss, cgrad) = self.critic_loss_and_grad(x.view(), &targets)?;
        if !critic_loss.is_finite() {
            return Err(Error::NonFinite("high-level critic loss".into()));
        }
        self.critic.apply_gradient(&mut self.critic_opt, &cgrad)?;

        let gd = self.gd();
        let obs = self.obs_matrix(batch.iter().map(|t| (&t.s_hi[..], &t.g_env[..])))?;
        let mut g_ach = Array2::zeros((batch.len(), gd));
        for (i, t) in batch.iter().enumerate() {
            g_ach.row_mut(i).iter_mut().zip(&t.achieved_at_issue).for_each(|(o, v)| *o = *v);
        }
        let xi = Array2::from_shape_fn((batch.len(), gd), |_| rng.sample::<f64, _>(StandardNormal));
        let eval = self.actor_objective(obs.view(), g_ach.view(), xi.view(), alpha, k, distance)?;
        if !eval.loss.is_finite() {
            return Err(Error::NonFinite("high-level actor loss".into()));
        }
        self.actor.apply_gradient(&mut self.actor_opt, &eval.grad)?;
        soft_update(&mut self.critic_target, &self.critic, self.tau)?;
        Ok(HighLosses {
            critic: critic_loss,
            actor: eval.loss,
            mean_gap: eval.mean_gap,
            mean_penalty: eval.mean_penalty,
            mean_log_prob: eval.mean_log_prob,
        })
    }
}

/// Balancing coefficient for the distance penalty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub alpha: f64,
    pub alpha_lr: f64,
}

impl DualState {
    /// `α ← max(0, α + lr · mean(d − k))`.
    pub fn update(&mut self, mean_gap: f64) {
        self.alpha = update_alpha(self.alpha, self.alpha_lr, mean_gap);
    }
}

pub fn update_alpha(alpha: f64, alpha_lr: f64, mean_gap: f64) -> f64 {
    (alpha + alpha_lr * mean_gap).max(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curriculum {
    pub k: f64,
    pub delta_k: f64,
    pub k_min: f64,
    pub k_max: f64,
    pub high_threshold: f64,
    pub low_threshold: f64,
}

impl Default for Curriculum {
    fn default() -> Self {
        Self {
            k: 0.05,
            delta_k: 0.05,
            k_min: 0.05,
            k_max: 1.0,
            high_threshold: 0.6,
            low_threshold: 0.3,
        }
    }
}

impl Curriculum {
    /// Next radius for a measured subgoal success rate.
    pub fn next_k(&self, success_rate: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&success_rate) {
            return Err(Error::InvalidArgument(format!("success rate {success_rate} outside [0, 1]")));
        }
        let k = if success_rate >= self.high_threshold {
            self.k + self.delta_k
        } else if success_rate < self.low_threshold {
            self.k - self.delta_k
        } else {
            self.k
        };
        Ok(k.clamp(self.k_min, self.k_max))
    }

    pub fn adjust(&mut self, success_rate: f64) -> Result<f64> {
        self.k = self.next_k(success_rate)?;
        Ok(self.k)
    }
}
