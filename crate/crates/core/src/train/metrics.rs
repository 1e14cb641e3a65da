use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};

/// One logged alignment step. Columns not produced by a loop are 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub policy_loss: f64,
    pub critic_loss: f64,
    pub disc_loss: f64,
    /// Mean discriminator probability on generated samples.
    pub disc_reward: f64,
    /// Mean terminal reward from the loop's reward source.
    pub mean_reward: f64,
    /// Mean per-rollout sum of KL-shaped rewards.
    pub mean_return: f64,
    /// Mean per-token KL to the anchor policy.
    pub mean_kl: f64,
    /// Most recent decisive win rate against the starting policy.
    pub win_rate: f64,
    /// Mean hidden-oracle quality of the sampled responses.
    pub mean_quality: f64,
}

pub const METRICS_COLUMNS: [&str; 10] =
    ["step", "policy_loss", "critic_loss", "disc_loss", "disc_reward", "mean_reward", "mean_return", "mean_kl", "win_rate", "mean_quality"];

impl MetricsRow {
    pub fn values(&self) -> [f64; 9] {
        [
            self.policy_loss,
            self.critic_loss,
            self.disc_loss,
            self.disc_reward,
            self.mean_reward,
            self.mean_return,
            self.mean_kl,
            self.win_rate,
            self.mean_quality,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

/// One logged warm-up step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WarmupRow {
    pub step: usize,
    pub loss: f64,
    /// Training-batch accuracy where the objective has one, else 0.
    pub accuracy: f64,
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::Parse { path: path.into(), line: i + 2, reason: e.to_string() }))
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidRecord(format!("{other:?}")),
    }
}
