use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::TrainRun;
use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,lr,cls_loss,ctm_loss,total,accuracy";

/// One JSON object per line: every step record, then every epoch record,
/// tagged by `"kind"`.
pub fn write_train_log(path: &Path, run: &TrainRun) -> Result<()> {
    let mut out = String::new();
    for s in &run.steps {
        let mut v = serde_json::to_value(s).expect("record serializes");
        v["kind"] = "step".into();
        out.push_str(&v.to_string());
        out.push('\n');
    }
    for e in &run.epochs {
        let mut v = serde_json::to_value(e).expect("record serializes");
        v["kind"] = "epoch".into();
        out.push_str(&v.to_string());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Per-epoch CSV; `accuracy` is empty for epochs without evaluation.
pub fn write_metrics_csv(path: &Path, run: &TrainRun) -> Result<()> {
    let mut out = format!("{METRICS_HEADER}\n");
    for e in &run.epochs {
        let acc = e.accuracy.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{},{}", e.epoch, e.lr, e.cls_loss, e.ctm_loss, e.total, acc);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
