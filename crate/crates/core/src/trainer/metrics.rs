//! Logged training metrics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::Result;

pub const METRICS_COLUMNS: [&str; 12] = [
    "step",
    "epoch",
    "loss_l",
    "loss_u",
    "loss_u_mean",
    "loss_u_min",
    "loss_u_max",
    "mask_rate",
    "lr",
    "train_err",
    "test_err",
    "ema_test_err",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub loss_l: f64,
    /// Unlabeled loss under the configured aggregator.
    pub loss_u: f64,
    pub loss_u_mean: f64,
    pub loss_u_min: f64,
    pub loss_u_max: f64,
    pub mask_rate: f64,
    pub lr: f64,
    /// Error of the raw model on the labeled training samples.
    pub train_err: f64,
    pub test_err: f64,
    pub ema_test_err: f64,
    /// Unlabeled loss of variant 0 alone; kept in memory only.
    #[serde(skip)]
    pub loss_u_first: f64,
}

pub fn write_metrics_csv(rows: &[MetricsRow], out: impl Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(METRICS_COLUMNS)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
