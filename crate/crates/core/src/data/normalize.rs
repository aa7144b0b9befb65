use serde::{Deserialize, Serialize};

use super::TimeSeries;
use crate::error::{Error, Result};

/// Floor applied to a channel's standard deviation so constant channels map to zero.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel z-score statistics, fitted on training data only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Population mean and standard deviation of every channel.
pub fn fit_normalizer(train: &TimeSeries) -> Result<NormStats> {
    let (m, k) = (train.len(), train.channels());
    if m < 2 {
        return Err(Error::contract(format!(
            "normalizer needs at least 2 steps, got {m}"
        )));
    }
    let mut mean = vec![0.0; k];
    for t in 0..m {
        for (acc, v) in mean.iter_mut().zip(train.step(t)) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= m as f64;
    }
    let mut var = vec![0.0; k];
    for t in 0..m {
        for ((acc, v), mu) in var.iter_mut().zip(train.step(t)).zip(&mean) {
            *acc += (v - mu) * (v - mu);
        }
    }
    let std = var
        .into_iter()
        .map(|v| (v / m as f64).sqrt().max(STD_FLOOR))
        .collect();
    Ok(NormStats { mean, std })
}

impl NormStats {
    fn check(&self, ts: &TimeSeries) -> Result<()> {
        if self.mean.len() != ts.channels() {
            return Err(Error::shape(format!(
                "stats fitted on {} channels, series has {}",
                self.mean.len(),
                ts.channels()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, ts: &TimeSeries) -> Result<TimeSeries> {
        self.check(ts)?;
        let k = ts.channels();
        let values = ts
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % k]) / self.std[i % k])
            .collect();
        Ok(ts.with_values(values))
    }

    pub fn invert(&self, ts: &TimeSeries) -> Result<TimeSeries> {
        self.check(ts)?;
        let k = ts.channels();
        let values = ts
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i % k] + self.mean[i % k])
            .collect();
        Ok(ts.with_values(values))
    }
}

pub fn apply_normalizer(ts: &TimeSeries, stats: &NormStats) -> Result<TimeSeries> {
    stats.apply(ts)
}
