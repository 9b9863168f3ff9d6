use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const METRICS_HEADER: &str = "step,stage,dataset,loss,lr,dev_acc";

/// One optimizer step of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub stage: String,
    pub dataset: String,
    pub loss: f64,
    pub lr: f64,
    pub dev_acc: Option<f64>,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let dev = r.dev_acc.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{},{}", r.step, r.stage, r.dataset, r.loss, r.lr, dev);
    }
    out
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    std::fs::write(path, metrics_csv(rows))?;
    Ok(())
}
