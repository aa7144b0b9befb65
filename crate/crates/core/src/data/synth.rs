//! Seeded multichannel sensor streams with injected anomalies.
//!
//! Each channel is a sum of sinusoids; channels are then mixed by a fixed
//! `K × K` matrix, Gaussian noise is added, and anomaly segments are written
//! over the result. Steps inside a segment are labelled [`ANOMALY`], all
//! others carry the device id.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{TimeSeries, ANOMALY};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    pub period: f64,
    pub amplitude: f64,
    pub phase: f64,
}

impl Sinusoid {
    pub fn new(period: f64, amplitude: f64, phase: f64) -> Self {
        Self {
            period,
            amplitude,
            phase,
        }
    }

    fn at(&self, t: f64) -> f64 {
        self.amplitude * (std::f64::consts::TAU * t / self.period + self.phase).sin()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// Burst of large impulses of random sign.
    Spike,
    /// Constant offset over the segment.
    LevelShift,
    /// Offset ramping linearly up to the full magnitude.
    Drift,
}

impl std::str::FromStr for AnomalyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "spike" => Ok(Self::Spike),
            "level_shift" => Ok(Self::LevelShift),
            "drift" => Ok(Self::Drift),
            other => Err(Error::config(format!("unknown anomaly kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub kinds: Vec<AnomalyKind>,
    /// Fraction of steps to mark anomalous, in `[0, 1]`.
    pub rate: f64,
    /// Offset size in raw sensor units.
    pub magnitude: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for AnomalySpec {
    fn default() -> Self {
        Self {
            kinds: vec![
                AnomalyKind::Spike,
                AnomalyKind::LevelShift,
                AnomalyKind::Drift,
            ],
            rate: 0.0,
            magnitude: 1.5,
            min_len: 16,
            max_len: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub length: usize,
    /// Sinusoid components of each channel before mixing.
    pub channels: Vec<Vec<Sinusoid>>,
    /// Row `i` gives the weights of the unmixed channels in output channel `i`.
    pub mixing: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    pub device_id: u32,
    /// Time index of the first generated step; lets a test stream continue a training stream.
    pub time_offset: usize,
    pub anomalies: AnomalySpec,
}

impl SynthSpec {
    /// Three mixed channels with a fast and a slow cycle each. Device ids
    /// above 1 stretch every period so device types are separable.
    pub fn sensor_default(length: usize, device_id: u32) -> Self {
        let stretch = 1.0 + 0.35 * f64::from(device_id.saturating_sub(1));
        let s = |p: f64, a: f64, ph: f64| Sinusoid::new(p * stretch, a, ph);
        Self {
            length,
            channels: vec![
                vec![s(50.0, 1.0, 0.0), s(200.0, 0.5, 0.3)],
                vec![s(50.0, 0.8, 1.0), s(120.0, 0.4, 0.0)],
                vec![s(80.0, 0.7, 0.5), s(200.0, 0.3, 2.0)],
            ],
            mixing: vec![
                vec![1.0, 0.0, 0.0],
                vec![0.5, 1.0, 0.0],
                vec![0.3, 0.4, 1.0],
            ],
            noise_sigma: 0.05,
            device_id,
            time_offset: 0,
            anomalies: AnomalySpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.channels.len();
        if self.length == 0 || k == 0 {
            return Err(Error::config(
                "synthetic series needs length and channels ≥ 1",
            ));
        }
        if self.mixing.len() != k || self.mixing.iter().any(|row| row.len() != k) {
            return Err(Error::config(format!("mixing matrix must be {k}×{k}")));
        }
        if self.channels.iter().flatten().any(|c| !(c.period > 0.0)) {
            return Err(Error::config("sinusoid periods must be positive"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise sigma must be ≥ 0"));
        }
        if self.device_id == ANOMALY {
            return Err(Error::config("device id 0 is reserved for anomalies"));
        }
        let a = &self.anomalies;
        if !(0.0..=1.0).contains(&a.rate) {
            return Err(Error::config(format!(
                "anomaly rate {} outside [0, 1]",
                a.rate
            )));
        }
        if a.rate > 0.0 && (a.kinds.is_empty() || a.min_len == 0 || a.min_len > a.max_len) {
            return Err(Error::config(
                "anomaly injection needs at least one kind and 1 ≤ min_len ≤ max_len",
            ));
        }
        Ok(())
    }
}

pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<TimeSeries> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, k) = (spec.length, spec.channels.len());
    let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");

    let mut values = Vec::with_capacity(m * k);
    let mut raw = vec![0.0; k];
    for step in 0..m {
        let t = (step + spec.time_offset) as f64;
        for (r, comps) in raw.iter_mut().zip(&spec.channels) {
            *r = comps.iter().map(|c| c.at(t)).sum();
        }
        for row in &spec.mixing {
            let mixed: f64 = row.iter().zip(&raw).map(|(w, r)| w * r).sum();
            values.push(mixed + noise.sample(&mut rng));
        }
    }

    let mut labels = vec![spec.device_id; m];
    inject(&mut values, &mut labels, k, &spec.anomalies, &mut rng);
    TimeSeries::new(values, k, Some(labels), None)
}

/// Places non-overlapping segments until exactly `round(rate · M)` steps are anomalous.
fn inject(
    values: &mut [f64],
    labels: &mut [u32],
    k: usize,
    spec: &AnomalySpec,
    rng: &mut ChaCha8Rng,
) {
    let m = labels.len();
    let target = (spec.rate * m as f64).round() as usize;
    let mut marked = 0;
    while marked < target {
        let want = rng
            .random_range(spec.min_len..=spec.max_len)
            .min(target - marked);
        let Some((start, len)) = place(labels, want, rng) else {
            break;
        };
        let kind = spec.kinds[rng.random_range(0..spec.kinds.len())];
        let channel = rng.random_range(0..k);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        for i in 0..len {
            let t = start + i;
            let offset = match kind {
                AnomalyKind::Spike => {
                    let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    s * spec.magnitude * rng.random_range(1.0..2.0)
                }
                AnomalyKind::LevelShift => sign * spec.magnitude,
                AnomalyKind::Drift => sign * spec.magnitude * (i + 1) as f64 / len as f64,
            };
            values[t * k + channel] += offset;
            labels[t] = ANOMALY;
        }
        marked += len;
    }
}

/// A free run of `want` steps not touching an existing segment; falls back to
/// the first free gap (possibly shorter) once random placement keeps failing.
fn place(labels: &[u32], want: usize, rng: &mut ChaCha8Rng) -> Option<(usize, usize)> {
    let m = labels.len();
    let free = |start: usize, len: usize| {
        let lo = start.saturating_sub(1);
        let hi = (start + len + 1).min(m);
        labels[lo..hi].iter().all(|&l| l != ANOMALY)
    };
    if want <= m {
        for _ in 0..200 {
            let start = rng.random_range(0..=m - want);
            if free(start, want) {
                return Some((start, want));
            }
        }
    }
    let mut t = 0;
    while t < m {
        if labels[t] == ANOMALY {
            t += 1;
            continue;
        }
        let run = labels[t..].iter().take_while(|&&l| l != ANOMALY).count();
        return Some((t, run.min(want)));
    }
    None
}
