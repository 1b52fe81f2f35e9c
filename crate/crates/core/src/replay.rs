//! Replay storage for both levels of the hierarchy.
//!
//! [`Buffer`] is a FIFO ring that also tracks which contiguous run of
//! insertions belongs to which episode. Items are addressed by their global
//! insertion sequence number, so "the most recent n episodes" and "a later
//! step of the same episode" are cheap range queries.

use std::collections::VecDeque;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{goal_reward, SparseReward};
use crate::error::{Error, Result};

pub const DEFAULT_CAPACITY: usize = 1_000_000;
pub const DEFAULT_NEAR_POLICY_EPISODES: usize = 10;

pub trait Episodic {
    fn episode_id(&self) -> u64;
}

/// One low-level step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalTransition {
    pub s: Vec<f64>,
    /// Flat action encoding (discrete index or continuous vector).
    pub a: Vec<f64>,
    pub r: SparseReward,
    pub s_next: Vec<f64>,
    pub achieved_next: Vec<f64>,
    pub g_sub: Vec<f64>,
    pub episode_id: u64,
    pub step_index: usize,
}

impl Episodic for GoalTransition {
    fn episode_id(&self) -> u64 {
        self.episode_id
    }
}

/// One high-level decision, from issuing a subgoal to the end of its segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HighTransition {
    pub s_hi: Vec<f64>,
    pub g_sub: Vec<f64>,
    pub s_end: Vec<f64>,
    pub g_env: Vec<f64>,
    pub r_hi: f64,
    pub achieved_at_issue: Vec<f64>,
    pub episode_id: u64,
}

impl Episodic for HighTransition {
    fn episode_id(&self) -> u64 {
        self.episode_id
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct EpisodeSpan {
    id: u64,
    start: u64,
    end: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Buffer<T> {
    capacity: usize,
    items: Vec<T>,
    total: u64,
    episodes: VecDeque<EpisodeSpan>,
}

impl<T: Episodic> Buffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        Self {
            capacity,
            items: Vec::new(),
            total: 0,
            episodes: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Sequence number of the oldest stored item.
    pub fn oldest(&self) -> u64 {
        self.total - self.items.len() as u64
    }

    /// One past the newest sequence number.
    pub fn end(&self) -> u64 {
        self.total
    }

    pub fn episode_count(&self) -> usize {
        self.episodes.len()
    }

    pub fn push(&mut self, item: T) {
        let seq = self.total;
        let id = item.episode_id();
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            let slot = (seq % self.capacity as u64) as usize;
            self.items[slot] = item;
        }
        self.total += 1;
        match self.episodes.back_mut() {
            Some(span) if span.id == id && span.end == seq => span.end += 1,
            _ => self.episodes.push_back(EpisodeSpan {
                id,
                start: seq,
                end: seq + 1,
            }),
        }
        let oldest = self.oldest();
        while let Some(front) = self.episodes.front_mut() {
            if front.end <= oldest {
                self.episodes.pop_front();
            } else {
                front.start = front.start.max(oldest);
                break;
            }
        }
    }

    fn slot(&self, seq: u64) -> usize {
        (seq % self.capacity as u64) as usize
    }

    pub fn get(&self, seq: u64) -> Option<&T> {
        (seq >= self.oldest() && seq < self.total).then(|| &self.items[self.slot(seq)])
    }

    fn span_of(&self, seq: u64) -> Option<EpisodeSpan> {
        let idx = self.episodes.partition_point(|s| s.end <= seq);
        self.episodes.get(idx).copied().filter(|s| s.start <= seq)
    }

    /// Stored sequence range of the episode containing `seq`.
    pub fn episode_range(&self, seq: u64) -> Option<Range<u64>> {
        self.span_of(seq).map(|s| s.start..s.end)
    }

    /// Sequence range covering the `last_n` most recent episodes.
    pub fn window(&self, last_n: usize) -> Result<Range<u64>> {
        if last_n == 0 {
            return Err(Error::InvalidArgument("near-policy window needs at least one episode".into()));
        }
        if self.episodes.is_empty() {
            return Err(Error::InsufficientData("window over an empty buffer".into()));
        }
        let first = self.episodes.len().saturating_sub(last_n);
        Ok(self.episodes[first].start..self.total)
    }

    pub fn iter_range(&self, range: Range<u64>) -> impl Iterator<Item = (u64, &T)> + '_ {
        range.filter_map(move |seq| self.get(seq).map(|t| (seq, t)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &T)> + '_ {
        self.iter_range(self.oldest()..self.total)
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<u64>> {
        if self.is_empty() {
            return Err(Error::InsufficientData("sampling from an empty buffer".into()));
        }
        let lo = self.oldest();
        Ok((0..count).map(|_| rng.random_range(lo..self.total)).collect())
    }

    /// Uniform draws (with replacement) from the most recent episodes.
    pub fn sample_near_policy<R: Rng + ?Sized>(
        &self,
        last_n_episodes: usize,
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<u64>> {
        let w = self.window(last_n_episodes)?;
        Ok((0..count).map(|_| rng.random_range(w.clone())).collect())
    }
}

pub type LowBuffer = Buffer<GoalTransition>;
pub type HighBuffer = Buffer<HighTransition>;

/// A low-level transition drawn for training, after optional relabeling.
#[derive(Clone, Debug, PartialEq)]
pub struct HindsightSample {
    pub transition: GoalTransition,
    pub index: u64,
    /// The transition whose achieved goal became the new subgoal.
    pub goal_index: Option<u64>,
}

/// Future-sampling relabel of already drawn transitions.
///
/// With probability `ratio` each item's subgoal is replaced by the achieved
/// goal of a step drawn uniformly from itself to the end of its episode, and
/// the sparse reward is recomputed against it.
pub fn relabel_future<R: Rng + ?Sized>(
    buffer: &LowBuffer,
    indices: &[u64],
    ratio: f64,
    epsilon: f64,
    rng: &mut R,
) -> Result<Vec<HindsightSample>> {
    indices
        .iter()
        .map(|&seq| {
            let mut t = buffer
                .get(seq)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("sequence {seq} is not stored")))?;
            let mut goal_index = None;
            if ratio > 0.0 && rng.random::<f64>() < ratio {
                let range = buffer.episode_range(seq).expect("stored items belong to an episode");
                let j = rng.random_range(seq..range.end);
                let future = buffer.get(j).expect("future index inside the stored episode");
                t.g_sub = future.achieved_next.clone();
                t.r = goal_reward(&t.achieved_next, &t.g_sub, epsilon)?;
                goal_index = Some(j);
            }
            Ok(HindsightSample {
                transition: t,
                index: seq,
                goal_index,
            })
        })
        .collect()
}

pub fn sample_low_hindsight<R: Rng + ?Sized>(
    buffer: &LowBuffer,
    batch_size: usize,
    ratio: f64,
    epsilon: f64,
    rng: &mut R,
) -> Result<Vec<HindsightSample>> {
    let idx = buffer.sample_uniform(batch_size, rng)?;
    relabel_future(buffer, &idx, ratio, epsilon, rng)
}

/// Replaces stored high-level rewards with fresh evaluations.
///
/// `reward` receives chunks of transitions and returns one reward per item.
/// With `window = Some(n)` only the `n` most recent episodes are rewritten.
pub fn rewrite_high_rewards<F>(buffer: &mut HighBuffer, window: Option<usize>, mut reward: F) -> Result<usize>
where
    F: FnMut(&[&HighTransition]) -> Result<Vec<f64>>,
{
    if buffer.is_empty() {
        return Ok(0);
    }
    let range = match window {
        Some(n) => buffer.window(n)?,
        None => buffer.oldest()..buffer.end(),
    };
    const CHUNK: u64 = 1024;
    let mut count = 0;
    let mut start = range.start;
    while start < range.end {
        let stop = (start + CHUNK).min(range.end);
        let values = {
            let refs: Vec<&HighTransition> = (start..stop).filter_map(|s| buffer.get(s)).collect();
            reward(&refs)?
        };
        if values.len() != (stop - start) as usize {
            return Err(Error::DimensionMismatch {
                expected: (stop - start) as usize,
                got: values.len(),
            });
        }
        for (seq, v) in (start..stop).zip(values) {
            if !v.is_finite() {
                return Err(Error::NonFinite("rewritten high-level reward".into()));
            }
            let slot = buffer.slot(seq);
            buffer.items[slot].r_hi = v;
            count += 1;
        }
        start = stop;
    }
    Ok(count)
}
