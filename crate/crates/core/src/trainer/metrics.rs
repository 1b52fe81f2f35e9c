//! Per-episode metrics.
//!
//! `metrics.csv` holds one row per episode with the columns of
//! [`METRICS_HEADER`]. Values depend only on the seed and configuration;
//! wall-clock times go to a separate `timing.csv` (`episode,seconds`).
//! Empty cells mean "not measured this episode" (for example `eval_success`
//! outside evaluation episodes, or losses before the first update).

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 22] = [
    "episode",
    "env_success",
    "segments",
    "subgoals_reached",
    "subgoal_success_rate",
    "k",
    "alpha",
    "mean_penalty",
    "mean_gap",
    "mean_r_hi",
    "high_critic_loss",
    "high_actor_loss",
    "low_base_loss",
    "low_explore_loss",
    "rnd_loss",
    "distance_loss",
    "reward_loss",
    "labels_total",
    "queries_issued",
    "queries_pending",
    "rewritten",
    "eval_success",
];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub episode: u64,
    pub env_success: bool,
    pub segments: usize,
    pub subgoals_reached: usize,
    pub subgoal_success_rate: f64,
    pub k: f64,
    pub alpha: f64,
    pub mean_penalty: Option<f64>,
    pub mean_gap: Option<f64>,
    pub mean_r_hi: f64,
    pub high_critic_loss: Option<f64>,
    pub high_actor_loss: Option<f64>,
    pub low_base_loss: Option<f64>,
    pub low_explore_loss: Option<f64>,
    pub rnd_loss: Option<f64>,
    pub distance_loss: Option<f64>,
    pub reward_loss: Option<f64>,
    pub labels_total: u64,
    pub queries_issued: u64,
    pub queries_pending: usize,
    pub rewritten: usize,
    pub eval_success: Option<f64>,
}

/// Appends metric rows and timings to CSV files.
pub struct MetricsWriter {
    metrics: csv::Writer<File>,
    timing: File,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

impl MetricsWriter {
    /// Opens `dir/metrics.csv` and `dir/timing.csv`. With `append`, existing
    /// files are extended (used when resuming) and no header is written.
    pub fn open(dir: &Path, append: bool) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let open = |name: &str| -> Result<(File, bool)> {
            let p = dir.join(name);
            let existed = p.exists() && std::fs::metadata(&p)?.len() > 0;
            let f = std::fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(p)?;
            Ok((f, append && existed))
        };
        let (mf, m_existed) = open("metrics.csv")?;
        let (mut tf, t_existed) = open("timing.csv")?;
        let mut metrics = csv::WriterBuilder::new().has_headers(false).from_writer(mf);
        if !m_existed {
            metrics.write_record(METRICS_HEADER).map_err(csv_err)?;
        }
        if !t_existed {
            writeln!(tf, "episode,seconds")?;
        }
        Ok(Self { metrics, timing: tf })
    }

    pub fn write(&mut self, row: &MetricsRow, seconds: f64) -> Result<()> {
        self.metrics.serialize(row).map_err(csv_err)?;
        self.metrics.flush()?;
        writeln!(self.timing, "{},{seconds:.6}", row.episode)?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}
