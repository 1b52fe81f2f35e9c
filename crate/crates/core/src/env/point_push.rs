use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{euclidean, Action, ActionSpace, EnvSpec, StepResult, DEFAULT_EPSILON, DEFAULT_HORIZON};
use crate::error::{Error, Result};

/// Planar pushing task.
///
/// State is `(agent_x, agent_y, puck_x, puck_y)`; the achieved goal is the puck
/// position. An action in `[-1, 1]²` moves the agent by `action · max_step`.
/// If the moved agent overlaps the puck, the puck is pushed along the
/// center line until the two disks just touch. Both bodies are kept inside
/// the arena.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointPushGeometry {
    pub half_extent: f64,
    pub max_step: f64,
    pub agent_radius: f64,
    pub puck_radius: f64,
    /// Goals are sampled uniformly in `[-goal_half_extent, goal_half_extent]²`.
    pub goal_half_extent: f64,
    /// Initial agent and puck positions are sampled in this box.
    pub spawn_half_extent: f64,
    pub epsilon: f64,
    pub horizon: usize,
}

impl Default for PointPushGeometry {
    fn default() -> Self {
        Self {
            half_extent: 0.5,
            max_step: 0.05,
            agent_radius: 0.03,
            puck_radius: 0.04,
            goal_half_extent: 0.3,
            spawn_half_extent: 0.35,
            epsilon: DEFAULT_EPSILON,
            horizon: DEFAULT_HORIZON,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PointPush {
    geometry: PointPushGeometry,
    spec: EnvSpec,
    agent: [f64; 2],
    puck: [f64; 2],
    steps: usize,
    done: bool,
}

impl PointPush {
    pub fn new(geometry: PointPushGeometry) -> Self {
        let h = geometry.half_extent - geometry.puck_radius;
        let spec = EnvSpec {
            state_dim: 4,
            action_space: ActionSpace::Box {
                dim: 2,
                low: -1.0,
                high: 1.0,
            },
            goal_dim: 2,
            epsilon: geometry.epsilon,
            horizon: geometry.horizon,
            goal_low: vec![-h, -h],
            goal_high: vec![h, h],
        };
        Self {
            geometry,
            spec,
            agent: [0.0; 2],
            puck: [0.1, 0.0],
            steps: 0,
            done: false,
        }
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn geometry(&self) -> &PointPushGeometry {
        &self.geometry
    }

    fn state(&self) -> Vec<f64> {
        vec![self.agent[0], self.agent[1], self.puck[0], self.puck[1]]
    }

    pub fn reset(&mut self, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = &self.geometry;
        let s = g.spawn_half_extent;
        let min_gap = 2.0 * (g.agent_radius + g.puck_radius);
        self.agent = [rng.random_range(-s..=s), rng.random_range(-s..=s)];
        loop {
            self.puck = [rng.random_range(-s..=s), rng.random_range(-s..=s)];
            if euclidean(&self.agent, &self.puck) >= min_gap {
                break;
            }
        }
        let gh = g.goal_half_extent;
        let goal = vec![rng.random_range(-gh..=gh), rng.random_range(-gh..=gh)];
        self.steps = 0;
        self.done = false;
        (self.state(), goal)
    }

    pub fn step(&mut self, action: &Action) -> Result<StepResult> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let a = match action {
            Action::Continuous(v) if v.len() == 2 && v.iter().all(|x| x.is_finite() && x.abs() <= 1.0) => {
                [v[0], v[1]]
            }
            other => return Err(Error::InvalidAction(format!("{other:?} is not in box(2, -1, 1)"))),
        };
        let g = &self.geometry;
        let agent_lim = g.half_extent - g.agent_radius;
        let puck_lim = g.half_extent - g.puck_radius;
        let contact = g.agent_radius + g.puck_radius;

        let mut agent = [
            (self.agent[0] + a[0] * g.max_step).clamp(-agent_lim, agent_lim),
            (self.agent[1] + a[1] * g.max_step).clamp(-agent_lim, agent_lim),
        ];
        let gap = euclidean(&agent, &self.puck);
        if gap < contact {
            let dir = if gap > 1e-12 {
                [(self.puck[0] - agent[0]) / gap, (self.puck[1] - agent[1]) / gap]
            } else {
                let n = (a[0] * a[0] + a[1] * a[1]).sqrt().max(1e-12);
                [a[0] / n, a[1] / n]
            };
            let puck = [
                (agent[0] + dir[0] * contact).clamp(-puck_lim, puck_lim),
                (agent[1] + dir[1] * contact).clamp(-puck_lim, puck_lim),
            ];
            // a puck pinned against the boundary holds the agent back
            if euclidean(&agent, &puck) < contact {
                agent = [
                    (puck[0] - dir[0] * contact).clamp(-agent_lim, agent_lim),
                    (puck[1] - dir[1] * contact).clamp(-agent_lim, agent_lim),
                ];
            }
            self.puck = puck;
        }
        self.agent = agent;
        self.steps += 1;
        self.done = self.steps >= self.spec.horizon;
        Ok(StepResult {
            next_state: self.state(),
            achieved_goal: self.puck.to_vec(),
            done: self.done,
        })
    }
}
