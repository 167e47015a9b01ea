use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One CSV row; quantities that a phase does not produce stay empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub phase: String,
    pub train_nll: Option<f64>,
    pub valid_nll: Option<f64>,
    pub bpc: Option<f64>,
    pub disc_loss: Option<f64>,
    pub disc_acc: Option<f64>,
    pub td_loss: Option<f64>,
    pub mean_penalty: Option<f64>,
    pub mean_reward: Option<f64>,
    pub grad_norm_actor: Option<f64>,
    pub grad_norm_critic: Option<f64>,
    pub grad_norm_disc: Option<f64>,
}

pub const COLUMNS: [&str; 13] = [
    "step",
    "phase",
    "train_nll",
    "valid_nll",
    "bpc",
    "disc_loss",
    "disc_acc",
    "td_loss",
    "mean_penalty",
    "mean_reward",
    "grad_norm_actor",
    "grad_norm_critic",
    "grad_norm_disc",
];

impl MetricsRow {
    pub fn new(step: u64, phase: &str) -> Self {
        Self {
            step,
            phase: phase.to_string(),
            ..Self::default()
        }
    }
}

/// Receives rows as training produces them.
pub trait MetricsSink {
    fn record(&mut self, row: &MetricsRow) -> Result<()>;
}

impl MetricsSink for Vec<MetricsRow> {
    fn record(&mut self, row: &MetricsRow) -> Result<()> {
        self.push(row.clone());
        Ok(())
    }
}

/// Discards every row.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _: &MetricsRow) -> Result<()> {
        Ok(())
    }
}

/// CSV writer with the header written up front, flushed after every row.
pub struct CsvSink<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> CsvSink<W> {
    /// `header` is false when appending to a file that already has one.
    pub fn new(inner: W, header: bool) -> Result<Self> {
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(inner);
        if header {
            writer.write_record(COLUMNS)?;
            writer.flush()?;
        }
        Ok(Self { writer })
    }
}

impl<W: Write> MetricsSink for CsvSink<W> {
    fn record(&mut self, row: &MetricsRow) -> Result<()> {
        self.writer.serialize(row)?;
        self.writer.flush()?;
        Ok(())
    }
}
