//! Shared suites for the integration tests and the acceptance runner.
//!
//! Every suite computes its reference independently of the code under test:
//! central finite differences for gradients, value iteration for the grid
//! oracle, closed-form distances for the straight-line trajectories.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use mentor::distance::{build_distance_batch, DistanceModel, DistancePair};
use mentor::env::{goal_reward, Action, ActionSpace, Env, EnvKind, SparseReward};
use mentor::high::{DualState, GoalBox, HighConfig, HighPolicy};
use mentor::low::{intrinsic_bonus, DualPolicy, Exploration, LowBatch, LowConfig, QAgent, SPARSE_VALUE_BOUNDS};
use mentor::prefs::{Preference, PreferenceRecord, QueryPair, RewardModel, Tuple};
use mentor::replay::{sample_low_hindsight, GoalTransition, HighTransition, LowBuffer};
use mentor::rnd::{RndPair, RunningStats};
use mentor::trainer::TrainConfig;

pub const FD_STEP: f64 = 1e-5;

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// The checked-in Four Rooms desk configuration.
pub fn desk_config() -> TrainConfig {
    TrainConfig::from_file(&workspace_root().join("configs/fourrooms.toml")).expect("configs/fourrooms.toml")
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `f` around `params`.
pub fn numeric_gradient(params: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + FD_STEP;
            let up = f(&p);
            p[i] = orig - FD_STEP;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, half: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-half..half))
}

fn point(rng: &mut ChaCha8Rng) -> Vec<f64> {
    vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]
}

/// Distillation loss of the novelty model.
pub fn rnd_instance(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rnd = RndPair::new(&[2, 8, 8, 4], 1e-3, seed).unwrap();
    let states = uniform_matrix(&mut rng, 6, 2, 0.5);
    let (_, analytic) = rnd.loss_and_grad(states.view()).unwrap();
    let params = rnd.predictor().parameters().to_vec();
    let numeric = numeric_gradient(&params, |p| rnd.loss_at(p, states.view()).unwrap());
    relative_error(&analytic, &numeric)
}

/// Bradley-Terry preference loss, ties included.
pub fn preference_instance(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = [1.0, 5.0, 20.0][seed as usize % 3];
    let model = RewardModel::new(2, 2, &[8, 8], 1e-3, seed).unwrap().with_logit_scale(scale).unwrap();
    let records: Vec<PreferenceRecord> = (0..6)
        .map(|id| PreferenceRecord {
            query: QueryPair {
                id,
                left: Tuple {
                    s: point(&mut rng),
                    g_sub: point(&mut rng),
                },
                right: Tuple {
                    s: point(&mut rng),
                    g_sub: point(&mut rng),
                },
                g_env: vec![0.25, 0.25],
                created_episode: 0,
            },
            label: [Preference::Left, Preference::Tie, Preference::Right][rng.random_range(0..3)],
        })
        .collect();
    let refs: Vec<&PreferenceRecord> = records.iter().collect();
    let (_, analytic) = model.loss_and_grad(&refs).unwrap();
    let params = model.net().parameters().to_vec();
    let numeric = numeric_gradient(&params, |p| {
        let mut m = model.clone();
        m.net_mut().parameters_mut().copy_from_slice(p);
        m.loss_and_grad(&refs).unwrap().0
    });
    relative_error(&analytic, &numeric)
}

/// Step-distance regression loss.
pub fn distance_instance(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = DistanceModel::new(2, &[8, 8], 1e-3, seed).unwrap();
    let batch: Vec<DistancePair> = (0..8)
        .map(|i| DistancePair {
            from: point(&mut rng),
            to: point(&mut rng),
            target: if i % 4 == 0 { 1.0 } else { rng.random_range(0.0..1.0) },
        })
        .collect();
    let (_, analytic) = model.loss_and_grad(&batch).unwrap();
    let params = model.net().parameters().to_vec();
    let numeric = numeric_gradient(&params, |p| {
        let mut m = model.clone();
        m.net_mut().parameters_mut().copy_from_slice(p);
        m.loss_and_grad(&batch).unwrap().0
    });
    relative_error(&analytic, &numeric)
}

pub fn high_policy(hidden: &[usize], beta: f64, seed: u64) -> HighPolicy {
    let cfg = HighConfig {
        hidden: hidden.to_vec(),
        actor_lr: 3e-4,
        critic_lr: 3e-4,
        gamma: 0.95,
        tau: 0.005,
        beta,
    };
    HighPolicy::new(2, GoalBox::new(&[-0.5, -0.5], &[0.5, 0.5]).unwrap(), &cfg, seed).unwrap()
}

/// Penalized high-level actor objective at fixed reparameterization noise.
pub fn high_actor_instance(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = high_policy(&[8, 8], rng.random_range(0.05..0.2), seed);
    let dm = DistanceModel::new(2, &[8], 1e-3, seed + 1000).unwrap();
    let n = 5;
    let obs = uniform_matrix(&mut rng, n, 4, 0.5);
    let g_ach = uniform_matrix(&mut rng, n, 2, 0.5);
    let xi = Array2::from_shape_fn((n, 2), |_| rng.sample::<f64, _>(StandardNormal));
    let alpha = rng.random_range(0.5..2.0);
    // d sits near 0.5 for an untrained model, so some rows are penalized
    let k = rng.random_range(0.4..0.6);
    let eval = policy.actor_objective(obs.view(), g_ach.view(), xi.view(), alpha, k, Some(&dm)).unwrap();
    let params = policy.actor().parameters().to_vec();
    let numeric = numeric_gradient(&params, |p| {
        let mut q = policy.clone();
        q.actor_mut().parameters_mut().copy_from_slice(p);
        q.actor_objective(obs.view(), g_ach.view(), xi.view(), alpha, k, Some(&dm)).unwrap().loss
    });
    relative_error(&eval.grad, &numeric)
}

pub fn low_config(hidden: &[usize]) -> LowConfig {
    LowConfig {
        hidden: hidden.to_vec(),
        actor_lr: 1e-3,
        critic_lr: 1e-3,
        gamma: 0.95,
        tau: 0.005,
        action_noise: 0.1,
        target_noise: 0.2,
        target_noise_clip: 0.5,
    }
}

fn random_low_batch(rng: &mut ChaCha8Rng, n: usize, n_actions: usize) -> LowBatch {
    LowBatch {
        s: uniform_matrix(rng, n, 2, 0.5),
        a: (0..n).map(|_| vec![rng.random_range(0..n_actions) as f64]).collect(),
        s_next: uniform_matrix(rng, n, 2, 0.5),
        g: uniform_matrix(rng, n, 2, 0.5),
        r: (0..n)
            .map(|_| if rng.random_bool(0.3) { SparseReward::HIT } else { SparseReward::MISS })
            .collect(),
    }
}

/// Low-level TD losses with stopped targets: `with_bonus = false` uses the
/// sparse goal reward alone, `true` adds a novelty bonus to it.
pub fn low_instance(seed: u64, with_bonus: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let agent = QAgent::new(4, 9, &low_config(&[8, 8]), seed).unwrap();
    let batch = random_low_batch(&mut rng, 8, 9);
    let (rewards, bounds): (Vec<f64>, _) = if with_bonus {
        (
            batch.r.iter().map(|r| r.value() + rng.random_range(-1.0..2.0)).collect(),
            None,
        )
    } else {
        (batch.r.iter().map(|r| r.value()).collect(), Some(SPARSE_VALUE_BOUNDS))
    };
    let targets = agent.targets(&batch, &rewards, bounds).unwrap();
    let (_, analytic) = agent.loss_and_grad(&batch, &targets).unwrap();
    let params = agent.q().parameters().to_vec();
    let numeric = numeric_gradient(&params, |p| {
        let mut a = agent.clone();
        a.q_mut().parameters_mut().copy_from_slice(p);
        a.loss_and_grad(&batch, &targets).unwrap().0
    });
    relative_error(&analytic, &numeric)
}

pub struct GradientReport {
    pub name: &'static str,
    pub worst: f64,
}

/// Worst relative error per loss over `instances` seeds.
pub fn gradient_suite(instances: u64) -> Vec<GradientReport> {
    let worst = |f: &dyn Fn(u64) -> f64| (0..instances).map(f).fold(0.0, f64::max);
    vec![
        GradientReport {
            name: "distillation",
            worst: worst(&rnd_instance),
        },
        GradientReport {
            name: "preference",
            worst: worst(&preference_instance),
        },
        GradientReport {
            name: "distance",
            worst: worst(&distance_instance),
        },
        GradientReport {
            name: "high actor",
            worst: worst(&high_actor_instance),
        },
        GradientReport {
            name: "low base",
            worst: worst(&|s| low_instance(s, false)),
        },
        GradientReport {
            name: "low explore",
            worst: worst(&|s| low_instance(s, true)),
        },
    ]
}

fn high_transition(rng: &mut ChaCha8Rng) -> HighTransition {
    HighTransition {
        s_hi: point(rng),
        g_sub: point(rng),
        s_end: point(rng),
        g_env: vec![0.25, 0.25],
        r_hi: rng.random_range(0.0..1.0),
        achieved_at_issue: point(rng),
        episode_id: 0,
    }
}

/// A distance model whose output is exactly one half everywhere.
pub fn constant_half_distance() -> DistanceModel {
    let mut dm = DistanceModel::new(2, &[8], 1e-3, 3).unwrap();
    dm.net_mut().parameters_mut().iter_mut().for_each(|p| *p = 0.0);
    dm
}

/// α after each of `steps` high-level updates on batches whose mean
/// `d − k` is held at `gap` (constant distance one half, `k = 0.5 − gap`).
pub fn dual_trajectory(gap: f64, steps: usize, alpha0: f64, lr: f64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut policy = high_policy(&[16], 0.1, 5);
    let dm = constant_half_distance();
    let k = 0.5 - gap;
    let mut dual = DualState { alpha: alpha0, alpha_lr: lr };
    let (mut alphas, mut gaps) = (vec![alpha0], Vec::new());
    for _ in 0..steps {
        let batch: Vec<HighTransition> = (0..16).map(|_| high_transition(&mut rng)).collect();
        let refs: Vec<&HighTransition> = batch.iter().collect();
        let losses = policy.update(&refs, dual.alpha, k, Some(&dm), &mut rng).unwrap();
        dual.update(losses.mean_gap);
        gaps.push(losses.mean_gap);
        alphas.push(dual.alpha);
    }
    (alphas, gaps)
}

/// Random-policy Four Rooms rollouts with random subgoals, stored as the trainer does.
pub fn random_low_buffer(episodes: u64, seed: u64) -> LowBuffer {
    let mut env = Env::new(EnvKind::FourRooms);
    let eps = env.spec().epsilon;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = LowBuffer::new(1_000_000);
    for ep in 0..episodes {
        let (mut s, _) = env.reset(ep);
        let mut g = point(&mut rng);
        let mut step_index = 0;
        loop {
            let a = Action::Discrete(rng.random_range(0..9));
            let st = env.step(&a).unwrap();
            let r = goal_reward(&st.achieved_goal, &g, eps).unwrap();
            buf.push(GoalTransition {
                s: s.clone(),
                a: a.to_vec(),
                r,
                s_next: st.next_state.clone(),
                achieved_next: st.achieved_goal.clone(),
                g_sub: g.clone(),
                episode_id: ep,
                step_index,
            });
            step_index += 1;
            s = st.next_state;
            if r.is_hit() || rng.random_bool(0.05) {
                g = point(&mut rng);
            }
            if st.done {
                break;
            }
        }
    }
    buf
}

#[derive(Debug, Default)]
pub struct HindsightReport {
    pub checked: usize,
    pub relabeled: usize,
    pub reward_mismatches: usize,
    pub index_violations: usize,
}

/// Draws `total` hindsight samples and checks each against the buffer.
pub fn hindsight_audit(total: usize, seed: u64) -> HindsightReport {
    let buf = random_low_buffer(60, seed);
    let eps = Env::new(EnvKind::FourRooms).spec().epsilon;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let mut report = HindsightReport::default();
    while report.checked < total {
        let n = (total - report.checked).min(1000);
        for x in sample_low_hindsight(&buf, n, 0.8, eps, &mut rng).unwrap() {
            report.checked += 1;
            let original = buf.get(x.index).unwrap();
            let t = &x.transition;
            if t.r != goal_reward(&t.achieved_next, &t.g_sub, eps).unwrap() {
                report.reward_mismatches += 1;
            }
            match x.goal_index {
                Some(j) => {
                    report.relabeled += 1;
                    let future = buf.get(j);
                    let ok = j >= x.index
                        && future.is_some_and(|f| f.episode_id == original.episode_id && f.achieved_next == t.g_sub);
                    if !ok {
                        report.index_violations += 1;
                    }
                }
                None => {
                    if t.g_sub != original.g_sub {
                        report.index_violations += 1;
                    }
                }
            }
        }
    }
    report
}

/// Largest gap between the novelty bonus and an independent z-score of
/// the same predictor errors, over a random batch.
pub fn bonus_mismatch(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rnd = RndPair::new(&[2, 16, 8], 1e-3, seed).unwrap();
    let stream = uniform_matrix(&mut rng, 50, 2, 0.5);
    let errors = rnd.reward_batch(stream.view()).unwrap();
    let mut stats = RunningStats::new();
    errors.iter().for_each(|e| stats.update(*e));
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let std = (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let batch = uniform_matrix(&mut rng, 20, 2, 0.5);
    let bonus = intrinsic_bonus(&rnd, &stats, batch.view(), 1.0).unwrap();
    rnd.reward_batch(batch.view())
        .unwrap()
        .iter()
        .zip(&bonus)
        .map(|(e, b)| ((e - mean) / std - b).abs())
        .fold(0.0, f64::max)
}

pub struct DistanceReport {
    pub held_out_mse: f64,
    pub unreached_mean: f64,
}

const LINE_STEPS: usize = 50;
const LINE_SPEED: f64 = 0.01;

/// A constant-speed straight line of `LINE_STEPS` steps and a subgoal past its end.
fn straight_line(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<f64>) {
    let start = [rng.random_range(-0.25..0.25), rng.random_range(-0.25..0.25)];
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let dir = [theta.cos(), theta.sin()];
    let traj = (0..=LINE_STEPS)
        .map(|i| {
            let t = i as f64 * LINE_SPEED;
            vec![start[0] + t * dir[0], start[1] + t * dir[1]]
        })
        .collect();
    let beyond = LINE_STEPS as f64 * LINE_SPEED + rng.random_range(0.55..0.75);
    (traj, vec![start[0] + beyond * dir[0], start[1] + beyond * dir[1]])
}

/// Fits the distance model on 100 straight-line trajectories and scores
/// it on pairs from 20 fresh ones.
pub fn distance_fit(seed: u64, steps: usize) -> DistanceReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for _ in 0..100 {
        let (traj, g) = straight_line(&mut rng);
        pairs.extend(build_distance_batch(&traj, &g, false, 64, 16, &mut rng).unwrap());
    }
    let mut model = DistanceModel::new(2, &[64, 64], 1e-3, seed).unwrap();
    for _ in 0..steps {
        let batch: Vec<DistancePair> = (0..256).map(|_| pairs[rng.random_range(0..pairs.len())].clone()).collect();
        model.train(&batch).unwrap();
    }
    let (mut se, mut n_within, mut unreached, mut n_unreached) = (0.0, 0usize, 0.0, 0usize);
    for _ in 0..20 {
        let (traj, g) = straight_line(&mut rng);
        for p in build_distance_batch(&traj, &g, false, 64, 16, &mut rng).unwrap() {
            let d = model.predict(&p.from, &p.to).unwrap();
            if p.to == g {
                unreached += d;
                n_unreached += 1;
            } else {
                // the closed form, not the index label, is the reference
                let truth = mentor::env::euclidean(&p.from, &p.to) / (LINE_STEPS as f64 * LINE_SPEED);
                se += (d - truth).powi(2);
                n_within += 1;
            }
        }
    }
    DistanceReport {
        held_out_mse: se / n_within as f64,
        unreached_mean: unreached / n_unreached as f64,
    }
}

/// 5×5 grid, goal in a corner, actions stay/up/right/down/left. Reward 1 on
/// entering the goal, which ends the episode.
pub struct Grid5;

impl Grid5 {
    pub const N: i64 = 5;
    pub const GOAL: (i64, i64) = (4, 4);
    pub const MOVES: [(i64, i64); 5] = [(0, 0), (0, 1), (1, 0), (0, -1), (-1, 0)];

    pub fn step(c: (i64, i64), a: usize) -> (i64, i64) {
        let (dx, dy) = Self::MOVES[a];
        ((c.0 + dx).clamp(0, Self::N - 1), (c.1 + dy).clamp(0, Self::N - 1))
    }

    pub fn coords(c: (i64, i64)) -> Vec<f64> {
        vec![(c.0 - 2) as f64 * 0.2, (c.1 - 2) as f64 * 0.2]
    }

    pub fn cells() -> impl Iterator<Item = (i64, i64)> {
        (0..Self::N).flat_map(|x| (0..Self::N).map(move |y| (x, y)))
    }

    /// Optimal values by value iteration.
    pub fn value_iteration(gamma: f64) -> std::collections::HashMap<(i64, i64), f64> {
        let mut v: std::collections::HashMap<_, _> = Self::cells().map(|c| (c, 0.0)).collect();
        for _ in 0..200 {
            let mut next = v.clone();
            for c in Self::cells().filter(|c| *c != Self::GOAL) {
                let best = (0..5)
                    .map(|a| {
                        let n = Self::step(c, a);
                        if n == Self::GOAL {
                            1.0
                        } else {
                            gamma * v[&n]
                        }
                    })
                    .fold(f64::MIN, f64::max);
                next.insert(c, best);
            }
            v = next;
        }
        v
    }
}

/// Trains the base policy on every grid transition and returns the largest
/// gap between its greedy discounted return and the optimal value.
pub fn grid_value_gap(updates: usize, seed: u64) -> f64 {
    let gamma = 0.95;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = LowConfig {
        gamma,
        ..low_config(&[64, 64])
    };
    let mut policy = DualPolicy::new(4, &ActionSpace::Discrete(5), &cfg, true, seed).unwrap();
    let goal = Grid5::coords(Grid5::GOAL);
    let mut rows = Vec::new();
    for c in Grid5::cells().filter(|c| *c != Grid5::GOAL) {
        for a in 0..5 {
            let n = Grid5::step(c, a);
            rows.push((c, a, n));
        }
    }
    let n = rows.len();
    let batch = LowBatch {
        s: Array2::from_shape_fn((n, 2), |(i, j)| Grid5::coords(rows[i].0)[j]),
        a: rows.iter().map(|r| vec![r.1 as f64]).collect(),
        s_next: Array2::from_shape_fn((n, 2), |(i, j)| Grid5::coords(rows[i].2)[j]),
        g: Array2::from_shape_fn((n, 2), |(_, j)| goal[j]),
        r: rows
            .iter()
            .map(|r| if r.2 == Grid5::GOAL { SparseReward::HIT } else { SparseReward::MISS })
            .collect(),
    };
    let rewards = batch.r.clone();
    for _ in 0..updates {
        policy.update_base(&batch, &rewards, &mut rng).unwrap();
    }
    let v = Grid5::value_iteration(gamma);
    let mut worst: f64 = 0.0;
    for start in Grid5::cells().filter(|c| *c != Grid5::GOAL) {
        let mut c = start;
        let mut ret = 0.0;
        for t in 0..50 {
            let a = match policy.act_base(&Grid5::coords(c), &goal, Exploration::Greedy, &mut rng).unwrap() {
                Action::Discrete(a) => a,
                Action::Continuous(_) => unreachable!(),
            };
            c = Grid5::step(c, a);
            if c == Grid5::GOAL {
                ret = gamma.powi(t);
                break;
            }
        }
        worst = worst.max((ret - v[&start]).abs());
    }
    worst
}

/// Reads a file produced by a run, failing loudly if it is missing.
pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// A configuration small enough for fast integration tests.
pub fn tiny_config(episodes: usize) -> TrainConfig {
    TrainConfig::from_toml_str(&format!(
        r#"
episodes = {episodes}
high_hidden = [16]
low_hidden = [16]
distance_hidden = [16]
reward_hidden = [16]
rnd_hidden = [16]
rnd_output = 8
high_batch_size = 16
low_batch_size = 32
reward_batch_size = 16
distance_batch_size = 16
high_iterations = 2
low_iterations = 4
query_frequency = 5
batch_queries = 4
eval_interval = 10
eval_episodes = 3
eval_rollouts = 3
"#
    ))
    .unwrap()
}
