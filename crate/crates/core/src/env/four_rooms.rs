use serde::{Deserialize, Serialize};

use super::{euclidean, Action, ActionSpace, EnvSpec, StepResult, DEFAULT_EPSILON, DEFAULT_HORIZON};
use crate::error::{Error, Result};

/// Maze layout of the four-rooms arena.
///
/// The arena is `[-half_extent, half_extent]²`, split into four rooms by
/// zero-thickness walls along `x = 0` and `y = 0`. Each door is an open gap of
/// width `door_width` centered on one of those lines. The agent lives on a
/// lattice of spacing `step`; a move whose target cell lies on a wall or
/// outside the arena leaves the agent in place.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourRoomsGeometry {
    pub half_extent: f64,
    pub step: f64,
    pub door_width: f64,
    pub doors: Vec<[f64; 2]>,
    pub start: [f64; 2],
    pub goal: [f64; 2],
    pub epsilon: f64,
    pub horizon: usize,
}

impl Default for FourRoomsGeometry {
    /// One door in each of the four wall arms.
    fn default() -> Self {
        Self {
            half_extent: 0.5,
            step: 0.05,
            door_width: 0.1,
            doors: vec![[0.0, -0.25], [-0.25, 0.0], [0.0, 0.25], [0.25, 0.0]],
            start: [0.4, -0.4],
            goal: [0.25, 0.25],
            epsilon: DEFAULT_EPSILON,
            horizon: DEFAULT_HORIZON,
        }
    }
}

impl FourRoomsGeometry {
    fn cells_per_unit(&self) -> i64 {
        (1.0 / self.step).round() as i64
    }

    fn half_cells(&self) -> i64 {
        (self.half_extent / self.step).round() as i64
    }

    pub fn validate(&self) -> Result<()> {
        let per_unit = 1.0 / self.step;
        if !(self.step > 0.0) || (per_unit - per_unit.round()).abs() > 1e-9 {
            return Err(Error::Config("four-rooms step must divide 1 exactly".into()));
        }
        let cells = self.half_extent / self.step;
        if (cells - cells.round()).abs() > 1e-9 || cells < 1.0 {
            return Err(Error::Config("half extent must be a multiple of the step".into()));
        }
        for d in &self.doors {
            if d[0] != 0.0 && d[1] != 0.0 {
                return Err(Error::Config(format!("door {d:?} is not on a wall line")));
            }
        }
        Ok(())
    }

    fn coord(&self, cell: i64) -> f64 {
        cell as f64 / self.cells_per_unit() as f64
    }

    fn to_cell(&self, v: f64) -> i64 {
        (v * self.cells_per_unit() as f64).round() as i64
    }

    fn in_gap(&self, along: f64, center: f64) -> bool {
        (along - center).abs() < self.door_width / 2.0 - 1e-12
    }

    /// True if the lattice point lies on a wall (door gaps excluded).
    pub fn is_wall_cell(&self, ix: i64, iy: i64) -> bool {
        let (x, y) = (self.coord(ix), self.coord(iy));
        let on_vertical = ix == 0;
        let on_horizontal = iy == 0;
        if !on_vertical && !on_horizontal {
            return false;
        }
        let open = self.doors.iter().any(|d| {
            let vertical_door = d[0] == 0.0 && d[1] != 0.0;
            let horizontal_door = d[1] == 0.0 && d[0] != 0.0;
            let v_ok = !on_vertical || (vertical_door && self.in_gap(y, d[1]));
            let h_ok = !on_horizontal || (horizontal_door && self.in_gap(x, d[0]));
            v_ok && h_ok && (vertical_door || horizontal_door)
        });
        !open
    }

    /// Closed wall segments `[x1, y1, x2, y2]` (gaps removed).
    pub fn wall_segments(&self) -> Vec<[f64; 4]> {
        let h = self.half_extent;
        let hw = self.door_width / 2.0;
        let split = |centers: Vec<f64>| {
            let mut centers = centers;
            centers.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut pieces = Vec::new();
            let mut lo = -h;
            for c in centers {
                if c - hw > lo {
                    pieces.push((lo, c - hw));
                }
                lo = c + hw;
            }
            if lo < h {
                pieces.push((lo, h));
            }
            pieces
        };
        let vertical: Vec<f64> = self.doors.iter().filter(|d| d[0] == 0.0).map(|d| d[1]).collect();
        let horizontal: Vec<f64> = self.doors.iter().filter(|d| d[1] == 0.0).map(|d| d[0]).collect();
        let mut segs = Vec::new();
        for (a, b) in split(vertical) {
            segs.push([0.0, a, 0.0, b]);
        }
        for (a, b) in split(horizontal) {
            segs.push([a, 0.0, b, 0.0]);
        }
        segs
    }
}

/// Movement offsets for the nine actions: stay, then N, NE, E, SE, S, SW, W, NW.
pub const MOVES: [(i64, i64); 9] = [
    (0, 0),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
    (-1, 0),
    (-1, 1),
];

#[derive(Clone, Debug)]
pub struct FourRooms {
    geometry: FourRoomsGeometry,
    spec: EnvSpec,
    cell: (i64, i64),
    steps: usize,
    done: bool,
}

impl FourRooms {
    pub fn new(geometry: FourRoomsGeometry) -> Self {
        let h = geometry.half_extent;
        let spec = EnvSpec {
            state_dim: 2,
            action_space: ActionSpace::Discrete(MOVES.len()),
            goal_dim: 2,
            epsilon: geometry.epsilon,
            horizon: geometry.horizon,
            goal_low: vec![-h, -h],
            goal_high: vec![h, h],
        };
        let start = (geometry.to_cell(geometry.start[0]), geometry.to_cell(geometry.start[1]));
        Self {
            geometry,
            spec,
            cell: start,
            steps: 0,
            done: false,
        }
    }

    pub fn geometry(&self) -> &FourRoomsGeometry {
        &self.geometry
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn position(&self) -> Vec<f64> {
        vec![self.geometry.coord(self.cell.0), self.geometry.coord(self.cell.1)]
    }

    /// Start and goal are fixed; the seed is accepted for interface symmetry.
    pub fn reset(&mut self, _seed: u64) -> (Vec<f64>, Vec<f64>) {
        let g = &self.geometry;
        self.cell = (g.to_cell(g.start[0]), g.to_cell(g.start[1]));
        self.steps = 0;
        self.done = false;
        (self.position(), g.goal.to_vec())
    }

    pub fn step(&mut self, action: &Action) -> Result<StepResult> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let idx = match action {
            Action::Discrete(i) if *i < MOVES.len() => *i,
            other => return Err(Error::InvalidAction(format!("{other:?} is not one of 9 moves"))),
        };
        let (dx, dy) = MOVES[idx];
        let target = (self.cell.0 + dx, self.cell.1 + dy);
        let n = self.geometry.half_cells();
        let inside = target.0.abs() <= n && target.1.abs() <= n;
        if inside && !self.geometry.is_wall_cell(target.0, target.1) {
            self.cell = target;
        }
        self.steps += 1;
        self.done = self.steps >= self.spec.horizon;
        let pos = self.position();
        Ok(StepResult {
            achieved_goal: pos.clone(),
            next_state: pos,
            done: self.done,
        })
    }
}

/// Dense oracle over the arena; cases are tested in order and the first
/// match wins, so points on a quadrant boundary take the earlier case.
pub fn four_rooms_oracle_reward(s: &[f64]) -> f64 {
    let (x, y) = (s[0], s[1]);
    if x >= 0.0 && y >= 0.0 {
        -euclidean(s, &[0.25, 0.25])
    } else if x <= 0.0 && y >= 0.0 {
        -euclidean(s, &[0.0, 0.3]) - 0.3
    } else if x <= 0.0 && y <= 0.0 {
        -euclidean(s, &[-0.3, 0.0]) - 0.6
    } else {
        -euclidean(s, &[0.0, -0.3]) - 1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn env() -> FourRooms {
        FourRooms::new(FourRoomsGeometry::default())
    }

    #[test]
    fn reset_is_fixed() {
        let mut e = env();
        for seed in [0, 7, 99] {
            let (s, g) = e.reset(seed);
            assert_eq!(s, vec![0.4, -0.4]);
            assert_eq!(g, vec![0.25, 0.25]);
        }
    }

    #[test]
    fn stay_action_keeps_position() {
        let mut e = env();
        e.reset(0);
        let r = e.step(&Action::Discrete(0)).unwrap();
        assert_eq!(r.next_state, vec![0.4, -0.4]);
    }

    #[test]
    fn moving_up_until_the_wall() {
        let mut e = env();
        e.reset(0);
        let mut ys = Vec::new();
        for _ in 0..10 {
            ys.push(e.step(&Action::Discrete(1)).unwrap().next_state[1]);
        }
        // y = -0.35 ... -0.05, then the wall at y = 0 blocks (no door at x = 0.4)
        let expected: Vec<f64> = (1..=7)
            .map(|k| (-8 + k) as f64 / 20.0)
            .chain(std::iter::repeat(-0.05).take(3))
            .collect();
        assert_eq!(ys, expected);
    }

    #[test]
    fn wall_blocks_and_door_passes() {
        let g = FourRoomsGeometry::default();
        assert!(g.is_wall_cell(0, 0));
        assert!(g.is_wall_cell(0, 3));
        assert!(!g.is_wall_cell(0, 5));
        assert!(!g.is_wall_cell(0, -5));
        assert!(!g.is_wall_cell(-5, 0));
        assert!(!g.is_wall_cell(5, 0));
        assert!(g.is_wall_cell(4, 0));
        assert!(g.is_wall_cell(0, 4));
        assert!(g.is_wall_cell(0, 6));

        let mut e = env();
        e.reset(0);
        e.cell = (1, 3);
        let r = e.step(&Action::Discrete(7)).unwrap();
        assert_eq!(r.next_state, vec![0.05, 0.15]);
        e.cell = (1, 5);
        let r = e.step(&Action::Discrete(7)).unwrap();
        assert_eq!(r.next_state, vec![0.0, 0.25]);
    }

    #[test]
    fn out_of_range_action_and_step_after_done() {
        let mut e = env();
        e.reset(0);
        assert!(matches!(e.step(&Action::Discrete(9)), Err(Error::InvalidAction(_))));
        assert!(e.step(&Action::Continuous(vec![0.0, 0.0])).is_err());
        for _ in 0..DEFAULT_HORIZON {
            e.step(&Action::Discrete(0)).unwrap();
        }
        assert!(matches!(e.step(&Action::Discrete(0)), Err(Error::EpisodeDone)));
    }

    fn segments_intersect(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> bool {
        let orient = |p: [f64; 2], q: [f64; 2], r: [f64; 2]| {
            let v = (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]);
            if v.abs() < 1e-12 {
                0
            } else if v > 0.0 {
                1
            } else {
                -1
            }
        };
        let on_seg = |p: [f64; 2], q: [f64; 2], r: [f64; 2]| {
            r[0] >= p[0].min(q[0]) - 1e-12
                && r[0] <= p[0].max(q[0]) + 1e-12
                && r[1] >= p[1].min(q[1]) - 1e-12
                && r[1] <= p[1].max(q[1]) + 1e-12
        };
        let (o1, o2, o3, o4) = (orient(p, q, a), orient(p, q, b), orient(a, b, p), orient(a, b, q));
        if o1 != o2 && o3 != o4 {
            return true;
        }
        (o1 == 0 && on_seg(p, q, a))
            || (o2 == 0 && on_seg(p, q, b))
            || (o3 == 0 && on_seg(a, b, p))
            || (o4 == 0 && on_seg(a, b, q))
    }

    #[test]
    fn random_walks_never_cross_walls() {
        let mut e = env();
        let walls = e.geometry().wall_segments();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rooms_seen = std::collections::BTreeSet::new();
        for ep in 0..200 {
            let (mut s, _) = e.reset(ep);
            loop {
                let a = rng.random_range(0..9);
                let r = e.step(&Action::Discrete(a)).unwrap();
                let q = &r.next_state;
                assert!(q[0].abs() <= 0.5 && q[1].abs() <= 0.5);
                if q != &s {
                    for w in &walls {
                        assert!(
                            !segments_intersect([s[0], s[1]], [q[0], q[1]], [w[0], w[1]], [w[2], w[3]]),
                            "move {s:?} -> {q:?} crosses wall {w:?}"
                        );
                    }
                }
                rooms_seen.insert(((q[0] > 0.0) as u8, (q[1] > 0.0) as u8));
                s = q.clone();
                if r.done {
                    break;
                }
            }
        }
        // random walks leave the start room
        assert!(rooms_seen.len() >= 2);
    }

    #[test]
    fn oracle_values() {
        assert_eq!(four_rooms_oracle_reward(&[0.25, 0.25]), 0.0);
        // (-0.3, 0) satisfies the second case first
        let v = four_rooms_oracle_reward(&[-0.3, 0.0]);
        assert!((v - (-(0.3f64 * 2f64.sqrt()) - 0.3)).abs() < 1e-12);
        assert!((v + 0.724_264).abs() < 1e-6);
        assert!((four_rooms_oracle_reward(&[0.3, -0.3]) + 1.3).abs() < 1e-12);
    }

    #[test]
    fn default_geometry_wall_segments() {
        let segs = FourRoomsGeometry::default().wall_segments();
        assert_eq!(segs.len(), 6);
        assert!(segs.contains(&[0.0, -0.2, 0.0, 0.2]));
    }
}
