//! Random network distillation: a frozen random embedding, a trained
//! predictor, and z-score normalization of the prediction error.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::approx::{Activation, Adam, Mlp};
use crate::error::{Error, Result};

pub const SIGMA_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RndPair {
    target: Mlp,
    predictor: Mlp,
    opt: Adam,
}

impl RndPair {
    /// Builds target and predictor from `sizes` (state dim first, embedding
    /// size last) with different seeds.
    pub fn new(sizes: &[usize], learning_rate: f64, seed: u64) -> Result<Self> {
        let target = Mlp::init(sizes, Activation::Relu, Activation::Identity, seed)?;
        let predictor = Mlp::init(sizes, Activation::Relu, Activation::Identity, seed.wrapping_add(1))?;
        Self::from_networks(target, predictor, learning_rate)
    }

    pub fn from_networks(target: Mlp, predictor: Mlp, learning_rate: f64) -> Result<Self> {
        if target.sizes() != predictor.sizes() {
            return Err(Error::ArchitectureMismatch);
        }
        let opt = Adam::for_net(learning_rate, &predictor);
        Ok(Self { target, predictor, opt })
    }

    pub fn target(&self) -> &Mlp {
        &self.target
    }

    pub fn predictor(&self) -> &Mlp {
        &self.predictor
    }

    /// `‖f̂(s) − f(s)‖²`.
    pub fn reward(&self, s: &[f64]) -> Result<f64> {
        let t = self.target.forward(s)?;
        let p = self.predictor.forward(s)?;
        Ok(t.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum())
    }

    pub fn reward_batch(&self, states: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let t = self.target.forward_batch(states)?;
        let p = self.predictor.forward_batch(states)?;
        let diff = p - t;
        Ok(diff.rows().into_iter().map(|r| r.iter().map(|v| v * v).sum()).collect())
    }

    /// Distillation loss `mean_s ‖f̂(s) − f(s)‖²` and its gradient with
    /// respect to the predictor parameters.
    pub fn loss_and_grad(&self, states: ArrayView2<'_, f64>) -> Result<(f64, Vec<f64>)> {
        if states.nrows() == 0 {
            return Err(Error::InsufficientData("RND training batch is empty".into()));
        }
        let target = self.target.forward_batch(states)?;
        let trace = self.predictor.forward_trace(states)?;
        let n = states.nrows() as f64;
        let diff: Array2<f64> = trace.output() - &target;
        let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
        let grad_out = diff * (2.0 / n);
        let g = self.predictor.backward(&trace, grad_out.view());
        Ok((loss, g.params))
    }

    /// Loss evaluated at arbitrary predictor parameters (same layout).
    pub fn loss_at(&self, predictor_params: &[f64], states: ArrayView2<'_, f64>) -> Result<f64> {
        let mut probe = self.clone();
        probe.predictor.parameters_mut().copy_from_slice(predictor_params);
        Ok(probe.loss_and_grad(states)?.0)
    }

    /// One predictor update; returns the pre-step loss.
    pub fn train(&mut self, states: ArrayView2<'_, f64>) -> Result<f64> {
        let (loss, grad) = self.loss_and_grad(states)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("RND loss".into()));
        }
        self.predictor.apply_gradient(&mut self.opt, &grad)?;
        Ok(loss)
    }
}

/// Streaming mean and variance (Welford), mergeable across chunks.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Sample standard deviation; zero with fewer than two observations.
    pub fn std(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).max(0.0).sqrt()
        }
    }

    pub fn update(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &RunningStats) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n;
        self.m2 += other.m2 + delta * delta * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    /// Z-score `(r − μ)/σ` with σ floored; zero until two samples were seen.
    pub fn normalize(&self, r: f64) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        (r - self.mean) / self.std().max(SIGMA_FLOOR)
    }
}
