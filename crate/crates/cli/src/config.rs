//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use satad_core::data::{AnomalyKind, WindowConfig};
use satad_core::detect::{InversionConfig, ScoreConfig};
use satad_core::train::TrainConfig;
use satad_core::GanDims;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Gan,
    Pca,
    Knn,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Gan => "gan",
            Self::Pca => "pca",
            Self::Knn => "knn",
        }
    }
}

impl FromStr for Method {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gan" => Ok(Self::Gan),
            "pca" => Ok(Self::Pca),
            "knn" => Ok(Self::Knn),
            other => bail!("unknown method {other:?} (expected gan, pca or knn)"),
        }
    }
}

/// What the PCA and KNN baselines see: flattened windows, or single time steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BaselineInput {
    #[default]
    Windows,
    Steps,
}

impl FromStr for BaselineInput {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "windows" => Ok(Self::Windows),
            "steps" => Ok(Self::Steps),
            other => bail!("unknown baseline input {other:?} (expected windows or steps)"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub train_length: usize,
    pub test_length: usize,
    /// Device types; each contributes an equal share of both series.
    pub devices: u32,
    pub noise_sigma: f64,
    pub anomaly_rate: f64,
    pub anomaly_magnitude: f64,
    pub anomaly_kinds: Vec<AnomalyKind>,
    pub anomaly_min_len: usize,
    pub anomaly_max_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_length: 20_000,
            test_length: 5_000,
            devices: 1,
            noise_sigma: 0.05,
            anomaly_rate: 0.05,
            anomaly_magnitude: 1.5,
            anomaly_kinds: vec![
                AnomalyKind::Spike,
                AnomalyKind::LevelShift,
                AnomalyKind::Drift,
            ],
            anomaly_min_len: 16,
            anomaly_max_len: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub window: WindowConfig,
    pub dedup_threshold: f64,
    pub latent: usize,
    pub hidden: usize,
    pub train: TrainConfig,
    pub score: ScoreConfig,
    pub method: Method,
    pub baseline_input: BaselineInput,
    pub pca_rank: usize,
    pub knn_k: usize,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub model_dir: Option<PathBuf>,
    pub out: PathBuf,
    pub bench_seconds: f64,
    pub bench_full_seconds: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            synth: SynthConfig::default(),
            window: WindowConfig::default(),
            dedup_threshold: 1e-3,
            latent: 2,
            hidden: 32,
            train: TrainConfig {
                epochs: 12,
                batch_size: 32,
                lr_g: 0.002,
                lr_d: 0.0002,
                ..TrainConfig::default()
            },
            score: ScoreConfig {
                inversion: InversionConfig {
                    steps: 50,
                    lr: 2.0,
                    restarts: 2,
                    seed: 42,
                },
                ..ScoreConfig::default()
            },
            method: Method::Gan,
            baseline_input: BaselineInput::Windows,
            pca_rank: 4,
            knn_k: 5,
            train_data: None,
            test_data: None,
            model_dir: None,
            out: PathBuf::from("."),
            bench_seconds: 60.0,
            bench_full_seconds: 10.0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("config key {key}: cannot parse {value:?}: {e}"))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)
            .with_context(|| format!("in config {}", path.display()))?;
        Ok(cfg)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value", i + 1))?;
            self.set(key.trim(), value.trim())
                .with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = &mut self.synth;
        let t = &mut self.train;
        let d = &mut self.score;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "train_length" => s.train_length = parse(key, value)?,
            "test_length" => s.test_length = parse(key, value)?,
            "devices" => s.devices = parse(key, value)?,
            "noise_sigma" => s.noise_sigma = parse(key, value)?,
            "anomaly_rate" => s.anomaly_rate = parse(key, value)?,
            "anomaly_magnitude" => s.anomaly_magnitude = parse(key, value)?,
            "anomaly_kinds" => {
                s.anomaly_kinds = value
                    .split(',')
                    .map(|k| parse(key, k.trim()))
                    .collect::<Result<_>>()?
            }
            "anomaly_min_len" => s.anomaly_min_len = parse(key, value)?,
            "anomaly_max_len" => s.anomaly_max_len = parse(key, value)?,
            "window" => self.window.w = parse(key, value)?,
            "stride" => self.window.s = parse(key, value)?,
            "dedup_threshold" => self.dedup_threshold = parse(key, value)?,
            "latent" => self.latent = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr_g" => t.lr_g = parse(key, value)?,
            "lr_d" => t.lr_d = parse(key, value)?,
            "momentum" => t.momentum = parse(key, value)?,
            "decay_factor" => t.scheduler.decay_factor = parse(key, value)?,
            "decay_every" => t.scheduler.decay_every = parse(key, value)?,
            "sample_average_every" => t.sample_average_every = parse(key, value)?,
            "lambda" => d.lambda = parse(key, value)?,
            "inversion_steps" => d.inversion.steps = parse(key, value)?,
            "inversion_lr" => d.inversion.lr = parse(key, value)?,
            "inversion_restarts" => d.inversion.restarts = parse(key, value)?,
            "threshold" => d.threshold = parse(key, value)?,
            "aggregation" => d.aggregation = parse(key, value)?,
            "method" => self.method = parse(key, value)?,
            "baseline_input" => self.baseline_input = parse(key, value)?,
            "pca_rank" => self.pca_rank = parse(key, value)?,
            "knn_k" => self.knn_k = parse(key, value)?,
            "train_data" => self.train_data = Some(PathBuf::from(value)),
            "test_data" => self.test_data = Some(PathBuf::from(value)),
            "model_dir" => self.model_dir = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "bench_seconds" => self.bench_seconds = parse(key, value)?,
            "bench_full_seconds" => self.bench_full_seconds = parse(key, value)?,
            other => bail!("unknown config key {other:?}"),
        }
        Ok(())
    }

    /// Propagates the run seed into every stochastic component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn score_config(&self) -> ScoreConfig {
        let mut score = self.score;
        score.inversion.seed = self.seed;
        score
    }

    pub fn dims(&self, features: usize) -> GanDims {
        GanDims {
            window: self.window.w,
            features,
            latent: self.latent,
            hidden: self.hidden,
        }
    }

    pub fn train_path(&self) -> PathBuf {
        self.train_data
            .clone()
            .unwrap_or_else(|| self.out.join("train.csv"))
    }

    pub fn test_path(&self) -> PathBuf {
        self.test_data
            .clone()
            .unwrap_or_else(|| self.out.join("test.csv"))
    }

    pub fn model_path(&self) -> PathBuf {
        self.model_dir.clone().unwrap_or_else(|| self.out.clone())
    }
}
