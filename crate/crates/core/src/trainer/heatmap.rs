//! Grid evaluations of the learned models over goal space.

use std::io::Write;
use std::path::Path;

use super::Trainer;
use crate::error::{Error, Result};
use crate::high::penalty;

pub const HEATMAP_HEADER: &str = "ix,iy,x,y,reward,distance,penalty,overlay,oracle";

/// One grid cell. `reward` is the preference model's score of the cell as a
/// subgoal from the reference state, `distance` the predicted distance from
/// the reference state's achieved goal, `penalty` `α·max(d − k, 0)` and
/// `overlay` their difference.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatCell {
    pub ix: usize,
    pub iy: usize,
    pub x: f64,
    pub y: f64,
    pub reward: f64,
    pub distance: f64,
    pub penalty: f64,
    pub overlay: f64,
    pub oracle: f64,
}

impl Trainer {
    /// Evaluates a `resolution × resolution` grid over the first two goal
    /// coordinates; cell centers are used.
    pub fn heatmap(&self, resolution: usize) -> Result<Vec<HeatCell>> {
        if resolution == 0 {
            return Err(Error::InvalidArgument("heatmap resolution must be positive".into()));
        }
        let spec = self.env.spec();
        if spec.goal_dim != 2 {
            return Err(Error::InvalidArgument("heatmaps need a two-dimensional goal space".into()));
        }
        let mut probe = self.env.clone();
        let (s_ref, g_env) = probe.reset(0);
        let from = self.env.achieved_goal(&s_ref);
        let (alpha, k) = (self.state.dual.alpha, self.state.curriculum.k);
        let mut out = Vec::with_capacity(resolution * resolution);
        for iy in 0..resolution {
            for ix in 0..resolution {
                let cell = |i: usize, d: usize| {
                    spec.goal_low[d] + (i as f64 + 0.5) / resolution as f64 * (spec.goal_high[d] - spec.goal_low[d])
                };
                let g = [cell(ix, 0), cell(iy, 1)];
                let reward = self.state.reward.score(&s_ref, &g, &g_env)?;
                let distance = self.state.distance.predict(&from, &g)?;
                let pen = alpha * penalty(distance, k);
                out.push(HeatCell {
                    ix,
                    iy,
                    x: g[0],
                    y: g[1],
                    reward,
                    distance,
                    penalty: pen,
                    overlay: reward - pen,
                    oracle: self.env.oracle_score(&g, &g_env),
                });
            }
        }
        Ok(out)
    }

    pub fn write_heatmap(&self, resolution: usize, path: &Path) -> Result<()> {
        let cells = self.heatmap(resolution)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{HEATMAP_HEADER}")?;
        for c in cells {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{}",
                c.ix, c.iy, c.x, c.y, c.reward, c.distance, c.penalty, c.overlay, c.oracle
            )?;
        }
        f.flush()?;
        Ok(())
    }
}
