use std::fmt::Write as _;

use super::align::{run_rlhb, AlignOutcome};
use super::config::TrainConfig;
use super::metrics::MetricsRow;
use super::Lab;
use crate::env::DemonstrationTriplet;
use crate::error::Result;
use crate::models::{DiscriminatorModel, PolicyModel};

/// The single knob a grid cell changes relative to the base configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AblationFactor {
    Kappa(f64),
    FrozenDisc,
    Rollouts(usize),
    Batch(usize),
}

impl AblationFactor {
    pub fn name(&self) -> String {
        match self {
            AblationFactor::Kappa(k) => format!("kappa={k}"),
            AblationFactor::FrozenDisc => "frozen-disc".into(),
            AblationFactor::Rollouts(r) => format!("rollouts={r}"),
            AblationFactor::Batch(b) => format!("batch={b}"),
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match *self {
            AblationFactor::Kappa(k) => c.ppo.kappa = k,
            AblationFactor::FrozenDisc => c.align.frozen_disc = true,
            AblationFactor::Rollouts(r) => c.ppo.rollouts_per_query = r,
            AblationFactor::Batch(b) => c.ppo.batch_queries = b,
        }
        c
    }
}

/// One factor at a time over the configured grid.
pub fn ablation_factors(config: &TrainConfig) -> Vec<AblationFactor> {
    let a = &config.ablation;
    let mut out: Vec<AblationFactor> = a.kappas.iter().map(|&k| AblationFactor::Kappa(k)).collect();
    if a.frozen {
        out.push(AblationFactor::FrozenDisc);
    }
    out.extend(a.rollouts.iter().map(|&r| AblationFactor::Rollouts(r)));
    out.extend(a.batches.iter().map(|&b| AblationFactor::Batch(b)));
    out
}

/// A finished (or failed) grid cell.
#[derive(Clone, Debug)]
pub struct AblationCell {
    pub factor: AblationFactor,
    pub seed: u64,
    pub config: TrainConfig,
    pub outcome: std::result::Result<AlignOutcome, String>,
}

impl AblationCell {
    pub fn name(&self) -> String {
        format!("{}/seed={}", self.factor.name(), self.seed)
    }

    pub fn metrics(&self) -> Option<&[MetricsRow]> {
        self.outcome.as_ref().ok().map(|o| o.metrics.as_slice())
    }
}

/// Run adversarial alignment for every factor and seed. A failing cell is
/// recorded with its error and the grid moves on.
pub fn run_ablations(
    base: &TrainConfig,
    factors: &[AblationFactor],
    sft: &PolicyModel,
    dm: &DiscriminatorModel,
    corpus: &[DemonstrationTriplet],
    mut on_cell: impl FnMut(&AblationCell),
) -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for factor in factors {
        for &seed in &base.ablation.seeds {
            let mut config = factor.apply(base);
            config.seed = seed;
            let outcome = run_cell(&config, sft, dm, corpus).map_err(|e| e.to_string());
            let cell = AblationCell { factor: *factor, seed, config, outcome };
            on_cell(&cell);
            cells.push(cell);
        }
    }
    cells
}

fn run_cell(config: &TrainConfig, sft: &PolicyModel, dm: &DiscriminatorModel, corpus: &[DemonstrationTriplet]) -> Result<AlignOutcome> {
    let lab = Lab::new(config.clone())?;
    run_rlhb(&lab, sft, dm, corpus)
}

/// Summary statistics of a run's trajectory used to compare cells.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectorySummary {
    /// Mean D on generated samples over the last 10 steps.
    pub final_disc_reward: f64,
    /// Standard deviation of mean D over the last 200 steps.
    pub tail_disc_std: f64,
    /// Variance of the batch mean return over the last 100 steps.
    pub tail_return_var: f64,
}

fn tail<T>(xs: &[T], n: usize) -> &[T] {
    &xs[xs.len().saturating_sub(n)..]
}

pub fn mean_of(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Population variance.
pub fn variance_of(xs: &[f64]) -> f64 {
    let m = mean_of(xs);
    mean_of(&xs.iter().map(|x| (x - m) * (x - m)).collect::<Vec<_>>())
}

pub fn summarize(rows: &[MetricsRow]) -> TrajectorySummary {
    let d: Vec<f64> = rows.iter().map(|r| r.disc_reward).collect();
    let ret: Vec<f64> = rows.iter().map(|r| r.mean_return).collect();
    TrajectorySummary {
        final_disc_reward: mean_of(tail(&d, 10)),
        tail_disc_std: variance_of(tail(&d, 200)).sqrt(),
        tail_return_var: variance_of(tail(&ret, 100)),
    }
}

/// Plain-text comparison table, one line per cell.
pub fn ablation_report(cells: &[AblationCell]) -> String {
    let mut out = String::from("cell\tseed\tfinal_disc_reward\ttail_disc_std\ttail_return_var\tcollapse_step\tstatus\n");
    for c in cells {
        match &c.outcome {
            Ok(o) => {
                let s = summarize(&o.metrics);
                let collapse = o.collapse_step.map_or_else(|| "-".to_string(), |s| s.to_string());
                let _ = writeln!(
                    out,
                    "{}\t{}\t{:.4}\t{:.4}\t{:.6}\t{}\tok",
                    c.factor.name(),
                    c.seed,
                    s.final_disc_reward,
                    s.tail_disc_std,
                    s.tail_return_var,
                    collapse
                );
            }
            Err(e) => {
                let _ = writeln!(out, "{}\t{}\t-\t-\t-\t-\tfailed: {}", c.factor.name(), c.seed, e.replace(['\t', '\n'], " "));
            }
        }
    }
    out
}
