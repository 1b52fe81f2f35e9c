//! Goal-conditioned environments.
//!
//! Two instances are provided: [`FourRooms`], a navigation maze with
//! doorways, and [`PointPush`], a planar point mass that pushes a puck.

mod four_rooms;
mod point_push;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use four_rooms::{four_rooms_oracle_reward, FourRooms, FourRoomsGeometry};
pub use point_push::{PointPush, PointPushGeometry};

/// Contact threshold used by both environments.
pub const DEFAULT_EPSILON: f64 = 0.05;
/// Steps per episode.
pub const DEFAULT_HORIZON: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ActionSpace {
    Discrete(usize),
    Box { dim: usize, low: f64, high: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    /// Flat numeric encoding used in replay storage.
    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            Action::Discrete(i) => vec![*i as f64],
            Action::Continuous(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub state_dim: usize,
    pub action_space: ActionSpace,
    pub goal_dim: usize,
    pub epsilon: f64,
    pub horizon: usize,
    /// Axis-aligned bounds of the goal space.
    pub goal_low: Vec<f64>,
    pub goal_high: Vec<f64>,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("epsilon must be positive".into()));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be positive".into()));
        }
        Ok(())
    }

    pub fn goal_contains(&self, g: &[f64]) -> bool {
        g.len() == self.goal_dim
            && g.iter()
                .zip(self.goal_low.iter().zip(&self.goal_high))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    pub achieved_goal: Vec<f64>,
    pub done: bool,
}

/// Sparse goal reward: hit iff `‖goal − achieved‖₂ < ε` (strict).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SparseReward(bool);

impl SparseReward {
    pub const MISS: SparseReward = SparseReward(false);
    pub const HIT: SparseReward = SparseReward(true);

    pub fn is_hit(self) -> bool {
        self.0
    }

    pub fn value(self) -> f64 {
        if self.0 {
            1.0
        } else {
            0.0
        }
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn goal_reward(achieved: &[f64], goal: &[f64], epsilon: f64) -> Result<SparseReward> {
    if achieved.len() != goal.len() {
        return Err(Error::DimensionMismatch {
            expected: goal.len(),
            got: achieved.len(),
        });
    }
    Ok(SparseReward(euclidean(achieved, goal) < epsilon))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    FourRooms,
    PointPush,
}

impl EnvKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvKind::FourRooms => "four-rooms",
            EnvKind::PointPush => "point-push",
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "four-rooms" => Ok(EnvKind::FourRooms),
            "point-push" => Ok(EnvKind::PointPush),
            other => Err(Error::Config(format!(
                "unknown environment {other:?} (expected four-rooms or point-push)"
            ))),
        }
    }
}

/// Closed set of environments, dispatched statically.
#[derive(Clone, Debug)]
pub enum Env {
    FourRooms(FourRooms),
    PointPush(PointPush),
}

impl Env {
    pub fn new(kind: EnvKind) -> Self {
        match kind {
            EnvKind::FourRooms => Env::FourRooms(FourRooms::new(FourRoomsGeometry::default())),
            EnvKind::PointPush => Env::PointPush(PointPush::new(PointPushGeometry::default())),
        }
    }

    pub fn kind(&self) -> EnvKind {
        match self {
            Env::FourRooms(_) => EnvKind::FourRooms,
            Env::PointPush(_) => EnvKind::PointPush,
        }
    }

    pub fn spec(&self) -> &EnvSpec {
        match self {
            Env::FourRooms(e) => e.spec(),
            Env::PointPush(e) => e.spec(),
        }
    }

    pub fn reset(&mut self, seed: u64) -> (Vec<f64>, Vec<f64>) {
        match self {
            Env::FourRooms(e) => e.reset(seed),
            Env::PointPush(e) => e.reset(seed),
        }
    }

    pub fn step(&mut self, action: &Action) -> Result<StepResult> {
        match self {
            Env::FourRooms(e) => e.step(action),
            Env::PointPush(e) => e.step(action),
        }
    }

    /// Projection of a state into goal space.
    pub fn achieved_goal(&self, state: &[f64]) -> Vec<f64> {
        match self {
            Env::FourRooms(_) => state[..2].to_vec(),
            Env::PointPush(_) => state[2..4].to_vec(),
        }
    }

    /// Dense score used by the scripted labeler: higher is better.
    pub fn oracle_score(&self, subgoal: &[f64], goal: &[f64]) -> f64 {
        match self {
            Env::FourRooms(_) => four_rooms_oracle_reward(subgoal),
            Env::PointPush(_) => -euclidean(subgoal, goal),
        }
    }

    /// Wall segments `[x1, y1, x2, y2]` for rendering, empty when there are none.
    pub fn wall_segments(&self) -> Vec<[f64; 4]> {
        match self {
            Env::FourRooms(e) => e.geometry().wall_segments(),
            Env::PointPush(_) => Vec::new(),
        }
    }

    /// A representative start state for visualizations.
    pub fn reference_state(&self) -> Vec<f64> {
        let mut probe = self.clone();
        probe.reset(0).0
    }
}
