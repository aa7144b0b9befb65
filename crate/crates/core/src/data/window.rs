use serde::{Deserialize, Serialize};

use super::{TimeSeries, ANOMALY};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sliding-window geometry: window length `w` and stride `s`, both in steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub w: usize,
    pub s: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { w: 32, s: 4 }
    }
}

impl WindowConfig {
    pub fn validate(&self, len: usize) -> Result<()> {
        if self.w == 0 || self.s == 0 {
            return Err(Error::config("window length and stride must be ≥ 1"));
        }
        if self.s > self.w {
            return Err(Error::config(format!(
                "stride {} exceeds window length {}",
                self.s, self.w
            )));
        }
        if self.w > len {
            return Err(Error::config(format!(
                "window length {} exceeds series length {len}",
                self.w
            )));
        }
        Ok(())
    }

    /// `floor((M − w) / s) + 1`.
    pub fn count(&self, len: usize) -> usize {
        (len - self.w) / self.s + 1
    }
}

/// Ordered `w × K` windows cut from one series.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub config: WindowConfig,
    pub channels: usize,
    /// Length of the source series.
    pub source_len: usize,
    pub windows: Vec<Tensor>,
    pub starts: Vec<usize>,
    pub labels: Option<Vec<u32>>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Keeps the windows at `keep` (ascending indices).
    pub fn select(&self, keep: &[usize]) -> WindowSet {
        WindowSet {
            config: self.config,
            channels: self.channels,
            source_len: self.source_len,
            windows: keep.iter().map(|&i| self.windows[i].clone()).collect(),
            starts: keep.iter().map(|&i| self.starts[i]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| keep.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Each window flattened row-major into a `w·K` vector.
    pub fn flattened(&self) -> Vec<Vec<f64>> {
        self.windows.iter().map(|t| t.data().to_vec()).collect()
    }
}

/// Label of a window covering `steps`: anomalous if any step is, otherwise
/// the most frequent device id (ties go to the smaller id).
pub fn window_label(steps: &[u32]) -> u32 {
    if steps.contains(&ANOMALY) {
        return ANOMALY;
    }
    let mut sorted = steps.to_vec();
    sorted.sort_unstable();
    let mut best = (0usize, ANOMALY);
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&v| v == sorted[i]).count();
        if j > best.0 {
            best = (j, sorted[i]);
        }
        i += j;
    }
    best.1
}

pub fn make_windows(ts: &TimeSeries, cfg: WindowConfig) -> Result<WindowSet> {
    cfg.validate(ts.len())?;
    let k = ts.channels();
    let m = cfg.count(ts.len());
    let starts: Vec<usize> = (0..m).map(|i| i * cfg.s).collect();
    let windows = starts
        .iter()
        .map(|&start| {
            Tensor::matrix(
                cfg.w,
                k,
                ts.values()[start * k..(start + cfg.w) * k].to_vec(),
            )
        })
        .collect();
    let labels = ts.labels().map(|labels| {
        starts
            .iter()
            .map(|&start| window_label(&labels[start..start + cfg.w]))
            .collect()
    });
    Ok(WindowSet {
        config: cfg,
        channels: k,
        source_len: ts.len(),
        windows,
        starts,
        labels,
    })
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.len() as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

/// Drops windows whose mean squared difference to the last retained window
/// is below `mse_threshold`. The first window is always kept.
pub fn dedup_filter(ws: &WindowSet, mse_threshold: f64) -> Result<WindowSet> {
    if !(mse_threshold >= 0.0) {
        return Err(Error::config(format!(
            "dedup threshold must be ≥ 0, got {mse_threshold}"
        )));
    }
    let mut keep = Vec::with_capacity(ws.len());
    for (i, window) in ws.windows.iter().enumerate() {
        match keep.last() {
            Some(&last) if mse(window, &ws.windows[last]) < mse_threshold => {}
            _ => keep.push(i),
        }
    }
    Ok(ws.select(&keep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(m: usize, k: usize) -> TimeSeries {
        TimeSeries::new((0..m * k).map(|v| v as f64).collect(), k, None, None).unwrap()
    }

    #[test]
    fn counts_and_starts() {
        let ws = make_windows(&ramp(10, 1), WindowConfig { w: 4, s: 2 }).unwrap();
        assert_eq!(ws.starts, vec![0, 2, 4, 6]);
        assert_eq!(ws.len(), 4);

        for s in 1..=5 {
            let ws = make_windows(&ramp(5, 2), WindowConfig { w: 5, s }).unwrap();
            assert_eq!(ws.len(), 1);
        }
    }

    #[test]
    fn rejects_bad_config() {
        let ts = ramp(5, 1);
        assert!(make_windows(&ts, WindowConfig { w: 6, s: 1 }).is_err());
        assert!(make_windows(&ts, WindowConfig { w: 3, s: 4 }).is_err());
        assert!(make_windows(&ts, WindowConfig { w: 3, s: 0 }).is_err());
    }

    #[test]
    fn any_anomalous_step_marks_window() {
        let ts = TimeSeries::new(vec![0.0; 4], 1, Some(vec![1, 1, 0, 1]), None).unwrap();
        let ws = make_windows(&ts, WindowConfig { w: 2, s: 2 }).unwrap();
        assert_eq!(ws.labels, Some(vec![1, 0]));
    }

    #[test]
    fn majority_label_with_ties_to_lower_id() {
        assert_eq!(window_label(&[2, 2, 1]), 2);
        assert_eq!(window_label(&[2, 1, 1, 2]), 1);
        assert_eq!(window_label(&[3, 0, 3]), 0);
    }

    #[test]
    fn windows_copy_exact_steps() {
        let ts = ramp(23, 3);
        let ws = make_windows(&ts, WindowConfig { w: 5, s: 3 }).unwrap();
        for (window, &start) in ws.windows.iter().zip(&ws.starts) {
            for r in 0..5 {
                assert_eq!(window.row(r), ts.step(start + r));
            }
        }
    }

    fn windows_from(rows: Vec<f64>) -> WindowSet {
        let ts = TimeSeries::new(rows, 1, None, None).unwrap();
        make_windows(&ts, WindowConfig { w: 1, s: 1 }).unwrap()
    }

    #[test]
    fn dedup_examples() {
        let same = windows_from(vec![1.0; 6]);
        assert_eq!(dedup_filter(&same, 0.1).unwrap().starts, vec![0]);
        assert_eq!(dedup_filter(&same, 0.0).unwrap().len(), 6);

        // MSE(A, A+ε) = 0.01, MSE(A, B) = 4.
        let ws = windows_from(vec![0.0, 0.1, 2.0]);
        assert_eq!(dedup_filter(&ws, 0.5).unwrap().starts, vec![0, 2]);
        assert!(dedup_filter(&ws, -1.0).is_err());
    }

    #[test]
    fn dedup_compares_against_last_retained() {
        // 0.0 → 0.2 → 0.4: each step MSE 0.04 but 0.4 vs 0.0 is 0.16.
        let ws = windows_from(vec![0.0, 0.2, 0.4]);
        assert_eq!(dedup_filter(&ws, 0.1).unwrap().starts, vec![0, 2]);
    }

    proptest! {
        #[test]
        fn dedup_is_ordered_subsequence(
            values in prop::collection::vec(-2.0f64..2.0, 8..80),
            threshold in 0.0f64..1.0,
        ) {
            let even = values.len() / 2 * 2;
            let ts = TimeSeries::new(values[..even].to_vec(), 2, None, None).unwrap();
            let ws = make_windows(&ts, WindowConfig { w: 3, s: 1 }).unwrap();
            let kept = dedup_filter(&ws, threshold).unwrap();
            prop_assert_eq!(kept.starts[0], 0);
            prop_assert!(kept.starts.windows(2).all(|p| p[0] < p[1]));
            for (window, start) in kept.windows.iter().zip(&kept.starts) {
                prop_assert_eq!(window, &ws.windows[*start]);
            }
        }
    }
}
