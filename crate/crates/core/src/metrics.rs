//! Metrics rows and run sinks.
//!
//! Training loops emit one [`MetricsRow`] per iteration through a
//! [`RunSink`]; the CSV-backed sink lives in the harness, and tests use
//! [`MemorySink`]. The CSV header is fixed:
//! `phase,iteration,mean_raw_reward,loss,eta,beta,wall_clock_s`.

use crate::error::Result;
use crate::nn::VelocityModel;

pub const CSV_HEADER: &str = "phase,iteration,mean_raw_reward,loss,eta,beta,wall_clock_s";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Train,
    Eval,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::Pretrain => write!(f, "pretrain"),
            Phase::Train => write!(f, "train"),
            Phase::Eval => write!(f, "eval"),
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "train" => Ok(Phase::Train),
            "eval" => Ok(Phase::Eval),
            other => Err(format!("unknown phase {other:?}")),
        }
    }
}

/// One metrics record. Fields without a value for a given phase (e.g. reward
/// during pretraining) carry NaN.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub phase: Phase,
    pub iteration: u64,
    pub mean_raw_reward: f64,
    pub loss: f64,
    pub eta: f64,
    pub beta: f64,
    pub wall_clock_s: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.phase,
            self.iteration,
            self.mean_raw_reward,
            self.loss,
            self.eta,
            self.beta,
            self.wall_clock_s
        )
    }
}

/// Where a training loop reports progress and checkpoints.
pub trait RunSink {
    fn emit(&mut self, row: &MetricsRow) -> Result<()>;
    fn save_checkpoint(&mut self, name: &str, model: &VelocityModel) -> Result<()>;
}

/// In-memory sink for tests and library callers that do their own IO.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub rows: Vec<MetricsRow>,
    pub checkpoints: Vec<(String, VelocityModel)>,
}

impl RunSink for MemorySink {
    fn emit(&mut self, row: &MetricsRow) -> Result<()> {
        self.rows.push(row.clone());
        Ok(())
    }

    fn save_checkpoint(&mut self, name: &str, model: &VelocityModel) -> Result<()> {
        self.checkpoints.retain(|(existing, _)| existing != name);
        self.checkpoints.push((name.to_string(), model.clone()));
        Ok(())
    }
}

/// Sink that drops everything; for throwaway runs inside tests and sweeps.
#[derive(Debug, Default)]
pub struct NullSink;

impl RunSink for NullSink {
    fn emit(&mut self, _row: &MetricsRow) -> Result<()> {
        Ok(())
    }
    fn save_checkpoint(&mut self, _name: &str, _model: &VelocityModel) -> Result<()> {
        Ok(())
    }
}
