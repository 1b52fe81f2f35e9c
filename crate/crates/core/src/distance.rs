//! Learned step distance `d: G × G → [0, 1]`.
//!
//! Pairs of achieved goals from one trajectory are regressed onto their
//! normalized index gap `|i − j| / L`. When a trajectory failed to reach its
//! subgoal, extra pairs `(g_i, g_sub)` are regressed onto 1 so that subgoals
//! the low level cannot reach look far away.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::approx::{grad_step, Activation, Adam, Mlp};
use crate::error::{Error, Result};

pub const DEFAULT_WITHIN_PAIRS: usize = 64;
pub const DEFAULT_AUGMENT_PAIRS: usize = 16;
pub const DEFAULT_PAIR_CAPACITY: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistancePair {
    pub from: Vec<f64>,
    pub to: Vec<f64>,
    pub target: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceModel {
    net: Mlp,
    opt: Adam,
    goal_dim: usize,
}

impl DistanceModel {
    /// `hidden` lists the hidden layer widths.
    pub fn new(goal_dim: usize, hidden: &[usize], learning_rate: f64, seed: u64) -> Result<Self> {
        let mut sizes = vec![2 * goal_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let net = Mlp::init(&sizes, Activation::Relu, Activation::Sigmoid, seed)?;
        let opt = Adam::for_net(learning_rate, &net);
        Ok(Self { net, opt, goal_dim })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn goal_dim(&self) -> usize {
        self.goal_dim
    }

    fn input(&self, from: &[f64], to: &[f64]) -> Result<Vec<f64>> {
        for g in [from, to] {
            if g.len() != self.goal_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.goal_dim,
                    got: g.len(),
                });
            }
        }
        Ok(from.iter().chain(to).copied().collect())
    }

    pub fn predict(&self, from: &[f64], to: &[f64]) -> Result<f64> {
        Ok(self.net.forward(&self.input(from, to)?)?[0])
    }

    /// Batched prediction; each row is `from ‖ to`.
    pub fn predict_batch(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        Ok(self.net.forward_batch(x)?.column(0).to_vec())
    }

    /// Predictions together with `∂d/∂to` for each row.
    pub fn predict_with_target_grad(&self, x: ArrayView2<'_, f64>) -> Result<(Vec<f64>, Array2<f64>)> {
        let trace = self.net.forward_trace(x)?;
        let ones = Array2::ones((x.nrows(), 1));
        let g = self.net.backward(&trace, ones.view());
        let d = trace.output().column(0).to_vec();
        let grad_to = g.input.slice(ndarray::s![.., self.goal_dim..]).to_owned();
        Ok((d, grad_to))
    }

    /// One step on `½ · mean (d − target)²`; returns the pre-step loss.
    pub fn train(&mut self, batch: &[DistancePair]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InsufficientData("distance batch is empty".into()));
        }
        let x = pair_inputs(batch);
        let targets: Vec<f64> = batch.iter().map(|p| p.target).collect();
        grad_step(&mut self.net, &mut self.opt, x.view(), |out| half_mse(out, &targets))
    }

    /// Loss and parameter gradient without stepping.
    pub fn loss_and_grad(&self, batch: &[DistancePair]) -> Result<(f64, Vec<f64>)> {
        let x = pair_inputs(batch);
        let targets: Vec<f64> = batch.iter().map(|p| p.target).collect();
        let trace = self.net.forward_trace(x.view())?;
        let (loss, grad_out) = half_mse(trace.output(), &targets);
        Ok((loss, self.net.backward(&trace, grad_out.view()).params))
    }
}

fn pair_inputs(batch: &[DistancePair]) -> Array2<f64> {
    let cols = batch.first().map_or(0, |p| p.from.len() + p.to.len());
    let mut x = Array2::zeros((batch.len(), cols));
    for (i, p) in batch.iter().enumerate() {
        for (c, v) in p.from.iter().chain(&p.to).enumerate() {
            x[[i, c]] = *v;
        }
    }
    x
}

/// `½ · mean (y − t)²` and its gradient with respect to `y`.
fn half_mse(out: &Array2<f64>, targets: &[f64]) -> (f64, Array2<f64>) {
    let n = targets.len() as f64;
    let mut grad = Array2::zeros(out.dim());
    let mut loss = 0.0;
    for (i, t) in targets.iter().enumerate() {
        let e = out[[i, 0]] - t;
        loss += 0.5 * e * e / n;
        grad[[i, 0]] = e / n;
    }
    (loss, grad)
}

/// Within-trajectory target `|i − j| / L`.
pub fn index_target(i: usize, j: usize, len: usize) -> f64 {
    i.abs_diff(j) as f64 / len as f64
}

/// Draws training pairs from one trajectory of achieved goals.
///
/// `L` is the number of steps, `trajectory.len() − 1`. Within pairs draw
/// `i` uniformly from `[0, L]` and `j` uniformly from `[i, L]`. When
/// `reached` is false, `augment` extra pairs `(g_i, g_sub)` with target 1 are
/// appended.
pub fn build_distance_batch<R: Rng + ?Sized>(
    trajectory: &[Vec<f64>],
    g_sub: &[f64],
    reached: bool,
    within: usize,
    augment: usize,
    rng: &mut R,
) -> Result<Vec<DistancePair>> {
    if trajectory.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "a distance trajectory needs at least 2 points, got {}",
            trajectory.len()
        )));
    }
    let l = trajectory.len() - 1;
    let mut out = Vec::with_capacity(within + if reached { 0 } else { augment });
    for _ in 0..within {
        let i = rng.random_range(0..=l);
        let j = rng.random_range(i..=l);
        out.push(DistancePair {
            from: trajectory[i].clone(),
            to: trajectory[j].clone(),
            target: index_target(i, j, l),
        });
    }
    if !reached {
        for _ in 0..augment {
            let i = rng.random_range(0..=l);
            out.push(DistancePair {
                from: trajectory[i].clone(),
                to: g_sub.to_vec(),
                target: 1.0,
            });
        }
    }
    Ok(out)
}

/// FIFO store of recent distance pairs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairBuffer {
    capacity: usize,
    pairs: VecDeque<DistancePair>,
}

impl PairBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            pairs: VecDeque::with_capacity(capacity.min(4096)),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn extend(&mut self, pairs: impl IntoIterator<Item = DistancePair>) {
        for p in pairs {
            if self.pairs.len() == self.capacity {
                self.pairs.pop_front();
            }
            self.pairs.push_back(p);
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<DistancePair> {
        if self.pairs.is_empty() {
            return Vec::new();
        }
        (0..count)
            .map(|_| self.pairs[rng.random_range(0..self.pairs.len())].clone())
            .collect()
    }
}
