//! Pairwise preferences over high-level decisions and the Bradley–Terry
//! reward model fit to them.

use std::collections::VecDeque;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::approx::{Activation, Adam, Mlp};
use crate::env::Env;
use crate::error::{Error, Result};
use crate::replay::HighBuffer;

pub const DEFAULT_PREFERENCE_CAPACITY: usize = 1000;
pub const ORACLE_TIE_TOLERANCE: f64 = 1e-6;

/// One side of a comparison: the state a subgoal was issued from and the subgoal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tuple {
    pub s: Vec<f64>,
    pub g_sub: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryPair {
    pub id: u64,
    pub left: Tuple,
    pub right: Tuple,
    pub g_env: Vec<f64>,
    pub created_episode: u64,
}

/// A preference label. On the wire `Left` is 0, `Right` is 1 and `Tie` is 0.5.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preference {
    Left,
    Tie,
    Right,
}

impl Preference {
    pub fn value(self) -> f64 {
        match self {
            Preference::Left => 0.0,
            Preference::Tie => 0.5,
            Preference::Right => 1.0,
        }
    }

    pub fn from_value(v: f64) -> Result<Self> {
        if v == 0.0 {
            Ok(Preference::Left)
        } else if v == 0.5 {
            Ok(Preference::Tie)
        } else if v == 1.0 {
            Ok(Preference::Right)
        } else {
            Err(Error::InvalidArgument(format!("label must be 0, 0.5 or 1, got {v}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub query: QueryPair,
    pub label: Preference,
}

/// Draws `count` pairs whose sides are uniform over the high-level
/// transitions of the last `window` episodes, never pairing an item with
/// itself. Ids start at `*next_id`, which is advanced.
pub fn generate_queries<R: Rng + ?Sized>(
    buffer: &HighBuffer,
    count: usize,
    window: usize,
    episode: u64,
    next_id: &mut u64,
    rng: &mut R,
) -> Result<Vec<QueryPair>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let range = buffer.window(window)?;
    let n = range.end - range.start;
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "query window holds {n} item(s), need at least 2"
        )));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        let left = buffer.get(range.start + a).expect("index inside window");
        let right = buffer.get(range.start + b).expect("index inside window");
        out.push(QueryPair {
            id: *next_id,
            left: Tuple {
                s: left.s_hi.clone(),
                g_sub: left.g_sub.clone(),
            },
            right: Tuple {
                s: right.s_hi.clone(),
                g_sub: right.g_sub.clone(),
            },
            g_env: left.g_env.clone(),
            created_episode: episode,
        });
        *next_id += 1;
    }
    Ok(out)
}

/// Scripted labeler: prefers the side whose subgoal scores higher under the
/// environment's dense oracle.
pub fn oracle_label(pair: &QueryPair, env: &Env) -> Preference {
    let l = env.oracle_score(&pair.left.g_sub, &pair.g_env);
    let r = env.oracle_score(&pair.right.g_sub, &pair.g_env);
    if (l - r).abs() < ORACLE_TIE_TOLERANCE {
        Preference::Tie
    } else if l > r {
        Preference::Left
    } else {
        Preference::Right
    }
}

/// `(p1, p2)` with `p1 = e^{r1} / (e^{r1} + e^{r2})`.
pub fn preference_prob(r1: f64, r2: f64) -> (f64, f64) {
    let p1 = crate::approx::sigmoid(r1 - r2);
    (p1, 1.0 - p1)
}

/// `log σ(x)` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Per-record objective `(1 − v)·log p1 + v·log p2`.
pub fn preference_objective(r1: f64, r2: f64, v: f64) -> f64 {
    (1.0 - v) * log_sigmoid(r1 - r2) + v * log_sigmoid(r2 - r1)
}

/// FIFO preference store.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreferenceBuffer {
    capacity: usize,
    records: VecDeque<PreferenceRecord>,
}

impl PreferenceBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            records: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, r: PreferenceRecord) {
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(r);
    }

    pub fn iter(&self) -> impl Iterator<Item = &PreferenceRecord> {
        self.records.iter()
    }

    pub fn to_vec(&self) -> Vec<PreferenceRecord> {
        self.records.iter().cloned().collect()
    }
}

/// `r_hf(s, g_sub, g_env) ∈ [0, 1]`.
///
/// The preference probabilities compare `c·r1` with `c·r2`, where `c` is
/// [`RewardModel::logit_scale`] (1 by default). With `c = 1` two bounded
/// scores can differ by at most one logit, so deterministic labels push the
/// fit toward a two-level step; a larger `c` lets the model rank finely
/// without saturating the sigmoid head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    net: Mlp,
    opt: Adam,
    state_dim: usize,
    goal_dim: usize,
    logit_scale: f64,
}

impl RewardModel {
    pub fn new(state_dim: usize, goal_dim: usize, hidden: &[usize], learning_rate: f64, seed: u64) -> Result<Self> {
        let mut sizes = vec![state_dim + 2 * goal_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let net = Mlp::init(&sizes, Activation::Relu, Activation::Sigmoid, seed)?;
        let opt = Adam::for_net(learning_rate, &net);
        Ok(Self {
            net,
            opt,
            state_dim,
            goal_dim,
            logit_scale: 1.0,
        })
    }

    pub fn with_logit_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("logit scale must be positive, got {scale}")));
        }
        self.logit_scale = scale;
        Ok(self)
    }

    pub fn logit_scale(&self) -> f64 {
        self.logit_scale
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim + 2 * self.goal_dim
    }

    pub fn score(&self, s: &[f64], g_sub: &[f64], g_env: &[f64]) -> Result<f64> {
        let x: Vec<f64> = s.iter().chain(g_sub).chain(g_env).copied().collect();
        Ok(self.net.forward(&x)?[0])
    }

    /// Scores rows laid out as `s ‖ g_sub ‖ g_env`.
    pub fn score_batch(&self, x: ndarray::ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        Ok(self.net.forward_batch(x)?.column(0).to_vec())
    }

    fn side_inputs(&self, records: &[&PreferenceRecord]) -> Result<(Array2<f64>, Vec<f64>)> {
        let n = records.len();
        let dim = self.input_dim();
        let mut x = Array2::zeros((2 * n, dim));
        let mut v = Vec::with_capacity(n);
        for (i, r) in records.iter().enumerate() {
            for (row, side) in [(i, &r.query.left), (n + i, &r.query.right)] {
                let vals: Vec<f64> = side.s.iter().chain(&side.g_sub).chain(&r.query.g_env).copied().collect();
                if vals.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: vals.len(),
                    });
                }
                x.row_mut(row).iter_mut().zip(vals).for_each(|(o, val)| *o = val);
            }
            v.push(r.label.value());
        }
        Ok((x, v))
    }

    /// Negated mean objective and its parameter gradient.
    pub fn loss_and_grad(&self, records: &[&PreferenceRecord]) -> Result<(f64, Vec<f64>)> {
        if records.is_empty() {
            return Err(Error::InsufficientData("preference batch is empty".into()));
        }
        let n = records.len();
        let (x, v) = self.side_inputs(records)?;
        let trace = self.net.forward_trace(x.view())?;
        let out = trace.output();
        let mut grad = Array2::zeros(out.dim());
        let mut loss = 0.0;
        let c = self.logit_scale;
        for i in 0..n {
            let (r1, r2) = (c * out[[i, 0]], c * out[[n + i, 0]]);
            loss -= preference_objective(r1, r2, v[i]) / n as f64;
            let (p1, _) = preference_prob(r1, r2);
            let g = -c * (1.0 - v[i] - p1) / n as f64;
            grad[[i, 0]] = g;
            grad[[n + i, 0]] = -g;
        }
        Ok((loss, self.net.backward(&trace, grad.view()).params))
    }

    pub fn train_batch(&mut self, records: &[&PreferenceRecord]) -> Result<f64> {
        let (loss, grad) = self.loss_and_grad(records)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("preference loss".into()));
        }
        self.net.apply_gradient(&mut self.opt, &grad)?;
        Ok(loss)
    }

    /// `epochs` shuffled passes over `records` in minibatches; returns the
    /// mean pre-step loss of the last epoch.
    pub fn train_epochs<R: Rng + ?Sized>(
        &mut self,
        records: &[PreferenceRecord],
        epochs: usize,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<f64> {
        if records.is_empty() {
            return Err(Error::InsufficientData("no preference records".into()));
        }
        let mut order: Vec<usize> = (0..records.len()).collect();
        let mut last = 0.0;
        for _ in 0..epochs {
            order.shuffle(rng);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(batch_size.max(1)) {
                let batch: Vec<&PreferenceRecord> = chunk.iter().map(|&i| &records[i]).collect();
                total += self.train_batch(&batch)?;
                batches += 1;
            }
            last = total / batches as f64;
        }
        Ok(last)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvKind, SparseReward};
    use crate::replay::HighTransition;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tuple(g: [f64; 2]) -> Tuple {
        Tuple {
            s: vec![0.0, 0.0],
            g_sub: g.to_vec(),
        }
    }

    fn pair(l: [f64; 2], r: [f64; 2], g_env: [f64; 2]) -> QueryPair {
        QueryPair {
            id: 0,
            left: tuple(l),
            right: tuple(r),
            g_env: g_env.to_vec(),
            created_episode: 0,
        }
    }

    #[test]
    fn probabilities() {
        assert_eq!(preference_prob(0.3, 0.3), (0.5, 0.5));
        let (p1, p2) = preference_prob(3f64.ln(), 0.0);
        assert!((p1 - 0.75).abs() < 1e-12);
        assert_eq!(p1 + p2, 1.0);
        assert_eq!(preference_prob(1000.0, 0.0).0, 1.0);
        assert!(preference_objective(1000.0, 0.0, 0.0).abs() < 1e-12);
        assert!((preference_objective(0.2, 0.2, 0.5) - 0.5f64.ln()).abs() < 1e-12);
        assert!(preference_objective(-800.0, 800.0, 0.0).is_finite());
    }

    #[test]
    fn label_values() {
        for p in [Preference::Left, Preference::Tie, Preference::Right] {
            assert_eq!(Preference::from_value(p.value()).unwrap(), p);
        }
        assert!(Preference::from_value(0.7).is_err());
    }

    #[test]
    fn oracle_labels() {
        let push = Env::new(EnvKind::PointPush);
        let g = [0.0, 0.0];
        assert_eq!(oracle_label(&pair([0.2, 0.0], [0.5, 0.0], g), &push), Preference::Left);
        assert_eq!(oracle_label(&pair([0.1, 0.1], [0.1, 0.1], g), &push), Preference::Tie);
        let rooms = Env::new(EnvKind::FourRooms);
        let g = [0.25, 0.25];
        assert_eq!(oracle_label(&pair([0.3, 0.3], [0.3, -0.3], g), &rooms), Preference::Left);
        assert_eq!(oracle_label(&pair([0.3, -0.3], [0.3, 0.3], g), &rooms), Preference::Right);
    }

    fn high(ep: u64, x: f64) -> HighTransition {
        HighTransition {
            s_hi: vec![0.0, 0.0],
            g_sub: vec![x, 0.0],
            s_end: vec![0.0, 0.0],
            g_env: vec![0.25, 0.25],
            r_hi: 0.0,
            achieved_at_issue: vec![0.0, 0.0],
            episode_id: ep,
        }
    }

    #[test]
    fn queries_come_from_window() {
        let mut b = HighBuffer::new(100);
        for ep in 0..5 {
            for k in 0..3 {
                b.push(high(ep, ep as f64 + k as f64 / 10.0));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut id = 7;
        assert!(generate_queries(&b, 0, 2, 5, &mut id, &mut rng).unwrap().is_empty());
        let qs = generate_queries(&b, 50, 2, 5, &mut id, &mut rng).unwrap();
        assert_eq!(qs.len(), 50);
        assert_eq!(id, 57);
        for q in &qs {
            assert!(q.left.g_sub[0] >= 3.0 && q.right.g_sub[0] >= 3.0);
            assert_ne!(q.left.g_sub, q.right.g_sub);
        }
        let _ = SparseReward::MISS;
    }

    #[test]
    fn two_item_window_pairs_both() {
        let mut b = HighBuffer::new(10);
        b.push(high(0, 0.1));
        b.push(high(0, 0.2));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut id = 0;
        for q in generate_queries(&b, 20, 1, 0, &mut id, &mut rng).unwrap() {
            let mut xs = [q.left.g_sub[0], q.right.g_sub[0]];
            xs.sort_by(f64::total_cmp);
            assert_eq!(xs, [0.1, 0.2]);
        }
        let mut one = HighBuffer::new(10);
        one.push(high(0, 0.1));
        assert!(generate_queries(&one, 1, 1, 0, &mut id, &mut rng).is_err());
    }

    #[test]
    fn tie_gradients_are_symmetric() {
        let m = RewardModel::new(2, 2, &[8], 1e-3, 0).unwrap();
        let q = pair([0.1, 0.2], [0.1, 0.2], [0.25, 0.25]);
        let rec = PreferenceRecord {
            query: q,
            label: Preference::Tie,
        };
        let (_, g) = m.loss_and_grad(&[&rec]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }
}
