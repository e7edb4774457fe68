//! Per-epoch metrics log.

use std::fmt::Write as _;

use crate::error::{CoreError, Result};

pub const LOG_HEADER: &str = "epoch,train_loss,lambda,val_oa,val_f1,val_auc,val_ece,seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    /// 1-based.
    pub epoch: usize,
    /// Sample-weighted mean batch loss.
    pub train_loss: f64,
    /// Sample-weighted mean of the per-batch KL weight.
    pub lambda: f64,
    pub val_oa: f64,
    pub val_f1: f64,
    pub val_auc: f64,
    pub val_ece: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<EpochRow>,
}

impl MetricsLog {
    pub fn push(&mut self, row: EpochRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.epoch <= last.epoch {
                return Err(CoreError::input(format!(
                    "epoch {} logged after epoch {}",
                    row.epoch, last.epoch
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    /// Header plus one LF-terminated line per row. Floats use the shortest
    /// representation that parses back to the same value.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{LOG_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.epoch, r.train_loss, r.lambda, r.val_oa, r.val_f1, r.val_auc, r.val_ece, r.seconds
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(LOG_HEADER) {
            return Err(CoreError::input("metrics log does not start with the expected header"));
        }
        let mut log = MetricsLog::default();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || CoreError::input(format!("metrics log row {}: `{line}`", i + 1));
            if f.len() != 8 {
                return Err(bad());
            }
            let num = |j: usize| f[j].parse::<f64>().map_err(|_| bad());
            log.push(EpochRow {
                epoch: f[0].parse().map_err(|_| bad())?,
                train_loss: num(1)?,
                lambda: num(2)?,
                val_oa: num(3)?,
                val_f1: num(4)?,
                val_auc: num(5)?,
                val_ece: num(6)?,
                seconds: num(7)?,
            })?;
        }
        Ok(log)
    }

    /// Row with the highest validation OA; the earliest wins ties.
    pub fn best(&self) -> Option<&EpochRow> {
        self.rows
            .iter()
            .fold(None, |best: Option<&EpochRow>, r| match best {
                Some(b) if b.val_oa >= r.val_oa => Some(b),
                _ => Some(r),
            })
    }
}
