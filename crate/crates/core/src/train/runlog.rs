use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// One logged iteration. `loss` is measured before that iteration's update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterRecord {
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
    /// Seconds since training started; kept in memory only so written logs
    /// stay reproducible.
    pub elapsed_secs: f64,
}

impl fmt::Display for IterRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "iter={} lr={:e} loss={:.6}", self.iter, self.lr, self.loss)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValRecord {
    pub epoch: u64,
    pub iter: u64,
    pub dice: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub iters: Vec<IterRecord>,
    pub validations: Vec<ValRecord>,
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T> {
    let s = rec.get(i).ok_or_else(|| Error::parse(0, format!("missing column {i}")))?;
    s.parse().map_err(|_| Error::parse(0, format!("bad value {s:?} in column {i}")))
}

impl RunLog {
    /// `iter,lr,loss` with shortest round-trip float formatting.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iter", "lr", "loss"])?;
        for r in &self.iters {
            w.write_record([r.iter.to_string(), r.lr.to_string(), r.loss.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_validation_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "iter", "dice"])?;
        for r in &self.validations {
            w.write_record([r.epoch.to_string(), r.iter.to_string(), r.dice.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read the iteration records of a log written by [`RunLog::write_csv`].
    pub fn read_csv(path: &Path) -> Result<Vec<IterRecord>> {
        let mut rd = csv::Reader::from_path(path)?;
        rd.records()
            .map(|rec| {
                let rec = rec?;
                Ok(IterRecord { iter: field(&rec, 0)?, lr: field(&rec, 1)?, loss: field(&rec, 2)?, elapsed_secs: 0.0 })
            })
            .collect()
    }

    /// Trailing moving average of the loss column over `window` entries.
    pub fn smoothed_loss(&self, window: usize) -> Vec<f64> {
        let losses: Vec<f64> = self.iters.iter().map(|r| r.loss).collect();
        losses.windows(window.max(1)).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect()
    }
}
