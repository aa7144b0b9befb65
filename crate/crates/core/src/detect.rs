//! Latent inversion, anomaly scoring and per-step classification.
//!
//! A test window `y` is scored as
//!
//! ```text
//! Res(y) = λ‖y − G(z′)‖ + (1 − λ)|D(y) − D(G(z′))|
//! ```
//!
//! where `z′` minimises `‖y − G(z)‖²` over latents found by gradient descent
//! from several seeded starts. Window scores are spread back onto the steps
//! they cover, and each step is labelled with the device type whose model
//! explains it best, or 0 when none explains it well enough.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{WindowSet, ANOMALY};
use crate::error::{Error, Result};
use crate::eval::threshold_sweep;
use crate::model::{GanModel, Trainable};
use crate::par::Exec;
use crate::tape::GradTape;
use crate::tensor::Tensor;
use crate::train::sample_latents;

/// Step halvings tried before an iteration gives up on descending.
const MAX_HALVINGS: usize = 30;

/// Points in the calibration sweep behind an automatic threshold.
pub const AUTO_THRESHOLD_POINTS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub steps: usize,
    pub lr: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            steps: 40,
            lr: 0.05,
            restarts: 2,
            seed: 42,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("inversion steps must be ≥ 1"));
        }
        self.validate_allowing_zero_steps()
    }

    /// Zero steps means "best of the random starts, no descent" (used for score-only benchmarking).
    pub fn validate_allowing_zero_steps(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::config("inversion restarts must be ≥ 1"));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::config("inversion rate must be ≥ 0"));
        }
        Ok(())
    }

    /// Same settings with an independent random stream for window `index`.
    pub fn for_window(&self, index: usize) -> WindowSeed {
        WindowSeed {
            config: *self,
            stream: index as u64,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct WindowSeed {
    config: InversionConfig,
    stream: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    Fixed(f64),
    /// Best-F1 threshold over a labelled calibration series.
    Auto,
}

impl std::str::FromStr for Threshold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "auto" => Ok(Self::Auto),
            other => other
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(Self::Fixed)
                .ok_or_else(|| {
                    Error::config(format!(
                        "threshold must be a number or \"auto\", got {other:?}"
                    ))
                }),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            other => Err(Error::config(format!("unknown aggregation {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub lambda: f64,
    pub inversion: InversionConfig,
    pub threshold: Threshold,
    pub aggregation: Aggregation,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            inversion: InversionConfig::default(),
            threshold: Threshold::Auto,
            aggregation: Aggregation::Mean,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        self.inversion.validate()
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!("λ = {lambda} outside [0, 1]")));
    }
    Ok(())
}

/// Result of a latent search.
#[derive(Clone, Debug, PartialEq)]
pub struct Inversion {
    pub latent: Tensor,
    /// `‖y − G(z′)‖²` at the returned latent.
    pub objective: f64,
    /// Objective after each iteration of the winning restart, starting point first.
    pub trace: Vec<f64>,
}

/// `‖y − G(z)‖²` and its gradient in `z`.
fn objective_and_grad(model: &GanModel, y: &Tensor, z: &Tensor) -> Result<(f64, Tensor)> {
    let mut tape = GradTape::new();
    let m = model.bind(&mut tape, Trainable::Neither);
    let zv = tape.leaf(z.clone());
    let yv = tape.constant(y.clone());
    let g = m.generate(&mut tape, zv)?;
    let diff = tape.sub(g, yv)?;
    let f = tape.sum_squares(diff);
    let mut grads = tape.backward(f)?;
    Ok((tape.value(f).item(), grads.take(zv)))
}

fn objective(model: &GanModel, y: &Tensor, z: &Tensor) -> Result<f64> {
    Ok(model.generate(z)?.sub(y)?.sum_squares())
}

/// Gradient descent on `‖y − G(z)‖²` from `restarts` standard-normal starts.
///
/// Each iteration halves its step until the objective does not increase, so
/// every trajectory is monotone. Steps never exceed `lr`; after a successful
/// iteration the next one tries twice the accepted step. Returns the latent with
/// the smallest final objective.
pub fn invert_latent(model: &GanModel, y: &Tensor, cfg: &InversionConfig) -> Result<Inversion> {
    cfg.validate()?;
    invert_with_stream(model, y, cfg, 0)
}

pub fn invert_latent_seeded(model: &GanModel, y: &Tensor, seed: &WindowSeed) -> Result<Inversion> {
    seed.config.validate_allowing_zero_steps()?;
    invert_with_stream(model, y, &seed.config, seed.stream)
}

fn invert_with_stream(
    model: &GanModel,
    y: &Tensor,
    cfg: &InversionConfig,
    stream: u64,
) -> Result<Inversion> {
    model.validate_window(y)?;
    let dims = model.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let starts = sample_latents(&mut rng, cfg.restarts, dims.window, dims.latent);

    let non_finite = |step: usize, f: f64| Error::NonFinite {
        step,
        what: format!("inversion objective {f}"),
    };

    let mut best: Option<Inversion> = None;
    for z0 in starts {
        let mut z = z0;
        let mut trace = Vec::with_capacity(cfg.steps + 1);
        let (mut f, mut grad) = if cfg.steps == 0 || cfg.lr == 0.0 {
            (objective(model, y, &z)?, Tensor::zeros(z.shape()))
        } else {
            objective_and_grad(model, y, &z)?
        };
        if !f.is_finite() {
            return Err(non_finite(0, f));
        }
        trace.push(f);
        if cfg.lr > 0.0 {
            let mut step = cfg.lr;
            for it in 0..cfg.steps {
                // Start from twice the last accepted step, never above the base rate.
                step = (2.0 * step).min(cfg.lr);
                let mut moved = false;
                for _ in 0..MAX_HALVINGS {
                    let candidate = z.zip_map(&grad, |zv, gv| zv - step * gv);
                    let (fc, gc) = objective_and_grad(model, y, &candidate)?;
                    if fc.is_nan() {
                        return Err(non_finite(it + 1, fc));
                    }
                    if fc <= f {
                        z = candidate;
                        f = fc;
                        grad = gc;
                        moved = true;
                        break;
                    }
                    step *= 0.5;
                }
                trace.push(f);
                if !moved {
                    break;
                }
            }
        }
        if best.as_ref().is_none_or(|b| f < b.objective) {
            best = Some(Inversion {
                latent: z,
                objective: f,
                trace,
            });
        }
    }
    Ok(best.expect("restarts ≥ 1"))
}

/// Both error terms behind a window score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreParts {
    /// `‖y − G(z′)‖`
    pub reconstruction: f64,
    /// `|D(y) − D(G(z′))|`
    pub discrimination: f64,
}

impl ScoreParts {
    pub fn blend(&self, lambda: f64) -> f64 {
        lambda * self.reconstruction + (1.0 - lambda) * self.discrimination
    }
}

pub fn score_parts(model: &GanModel, y: &Tensor, latent: &Tensor) -> Result<ScoreParts> {
    let reconstructed = model.generate(latent)?;
    let reconstruction = y.sub(&reconstructed)?.l2_norm();
    let discrimination = (model.discriminate(y)? - model.discriminate(&reconstructed)?).abs();
    Ok(ScoreParts {
        reconstruction,
        discrimination,
    })
}

/// `λ‖y − G(z′)‖ + (1 − λ)|D(y) − D(G(z′))|`.
pub fn score_window(model: &GanModel, y: &Tensor, latent: &Tensor, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(score_parts(model, y, latent)?.blend(lambda))
}

/// A detector that turns one window into one non-negative score.
pub trait WindowScorer: Sync {
    fn score(&self, index: usize, window: &Tensor) -> Result<f64>;
}

/// GAN scoring: invert, then blend.
pub struct GanScorer<'a> {
    pub model: &'a GanModel,
    pub lambda: f64,
    pub inversion: InversionConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowScore {
    pub score: f64,
    pub parts: ScoreParts,
    pub latent: Tensor,
}

impl GanScorer<'_> {
    pub fn score_full(&self, index: usize, window: &Tensor) -> Result<WindowScore> {
        let inv = invert_latent_seeded(self.model, window, &self.inversion.for_window(index))?;
        let parts = score_parts(self.model, window, &inv.latent)?;
        Ok(WindowScore {
            score: parts.blend(self.lambda),
            parts,
            latent: inv.latent,
        })
    }
}

impl WindowScorer for GanScorer<'_> {
    fn score(&self, index: usize, window: &Tensor) -> Result<f64> {
        self.score_full(index, window).map(|s| s.score)
    }
}

pub fn score_windows<S: WindowScorer + ?Sized>(
    scorer: &S,
    windows: &[Tensor],
    exec: Exec,
) -> Result<Vec<f64>> {
    exec.map(windows, |i, w| scorer.score(i, w))
        .into_iter()
        .collect()
}

/// Spreads window scores onto the `n` steps they cover.
///
/// Covered steps take the mean (or max) of every covering window; steps no
/// window reaches copy the nearest covered step, preferring the earlier one
/// on ties.
pub fn aggregate_steps(
    window_scores: &[f64],
    starts: &[usize],
    w: usize,
    n: usize,
    mode: Aggregation,
) -> Result<Vec<f64>> {
    if window_scores.len() != starts.len() {
        return Err(Error::shape(format!(
            "{} scores for {} windows",
            window_scores.len(),
            starts.len()
        )));
    }
    if window_scores.is_empty() {
        return Err(Error::contract("no windows to aggregate"));
    }
    if let Some(&bad) = starts.iter().find(|&&s| s + w > n) {
        return Err(Error::shape(format!(
            "window at {bad} of length {w} runs past {n} steps"
        )));
    }
    let mut acc = vec![0.0; n];
    let mut count = vec![0usize; n];
    for (&score, &start) in window_scores.iter().zip(starts) {
        for t in start..start + w {
            match mode {
                Aggregation::Mean => acc[t] += score,
                Aggregation::Max => {
                    acc[t] = if count[t] == 0 {
                        score
                    } else {
                        acc[t].max(score)
                    }
                }
            }
            count[t] += 1;
        }
    }
    if mode == Aggregation::Mean {
        for (a, &c) in acc.iter_mut().zip(&count) {
            if c > 0 {
                *a /= c as f64;
            }
        }
    }

    // Distance to the nearest covered step on each side.
    let mut left: Vec<Option<usize>> = vec![None; n];
    let mut last = None;
    for t in 0..n {
        if count[t] > 0 {
            last = Some(t);
        }
        left[t] = last;
    }
    let mut right = None;
    let mut out = acc.clone();
    for t in (0..n).rev() {
        if count[t] > 0 {
            right = Some(t);
            continue;
        }
        let src = match (left[t], right) {
            (Some(l), Some(r)) => {
                if t - l <= r - t {
                    l
                } else {
                    r
                }
            }
            (Some(l), None) => l,
            (None, Some(r)) => r,
            (None, None) => unreachable!("at least one window"),
        };
        out[t] = acc[src];
    }
    Ok(out)
}

/// Per-step scores of one device-type model.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores {
    pub class_id: u32,
    pub scores: Vec<f64>,
}

/// Labels each step with the class of lowest score when that score is
/// `≤ threshold`, otherwise [`ANOMALY`]. Ties go to the lowest class id.
pub fn classify(classes: &[ClassScores], threshold: f64) -> Result<Vec<u32>> {
    let first = classes
        .first()
        .ok_or_else(|| Error::config("classification needs at least one class model"))?;
    let n = first.scores.len();
    if classes.iter().any(|c| c.scores.len() != n) {
        return Err(Error::shape("class score series differ in length"));
    }
    if classes.iter().any(|c| c.class_id == ANOMALY) {
        return Err(Error::config("class id 0 is reserved for anomalies"));
    }
    Ok((0..n)
        .map(|t| {
            let (id, score) = min_class(classes, t);
            if score <= threshold {
                id
            } else {
                ANOMALY
            }
        })
        .collect())
}

fn min_class(classes: &[ClassScores], t: usize) -> (u32, f64) {
    let mut best = (classes[0].class_id, classes[0].scores[t]);
    for c in &classes[1..] {
        let s = c.scores[t];
        if s < best.1 || (s == best.1 && c.class_id < best.0) {
            best = (c.class_id, s);
        }
    }
    best
}

/// Lowest class score at every step.
pub fn min_scores(classes: &[ClassScores]) -> Vec<f64> {
    if classes.is_empty() {
        return Vec::new();
    }
    (0..classes[0].scores.len())
        .map(|t| min_class(classes, t).1)
        .collect()
}

/// Scores of one class model over a window set.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSeries {
    pub class_id: u32,
    pub window_scores: Vec<f64>,
    /// Error terms and inverted latents per window; empty for non-GAN scorers.
    pub parts: Vec<ScoreParts>,
    pub latents: Vec<Tensor>,
    pub step_scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSeries {
    pub classes: Vec<ClassSeries>,
    /// Minimum over class models at each step.
    pub step_scores: Vec<f64>,
    pub predicted: Vec<u32>,
    pub truth: Option<Vec<u32>>,
    pub threshold: f64,
}

impl ScoreSeries {
    /// Columns: `step,score,predicted_label[,true_label]`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_score_csv(
            path,
            &self.step_scores,
            &self.predicted,
            self.truth.as_deref(),
        )
    }
}

pub fn write_score_csv(
    path: impl AsRef<Path>,
    scores: &[f64],
    predicted: &[u32],
    truth: Option<&[u32]>,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::with_capacity(scores.len() * 32);
    out.push_str("step,score,predicted_label");
    if truth.is_some() {
        out.push_str(",true_label");
    }
    out.push('\n');
    for (t, (s, p)) in scores.iter().zip(predicted).enumerate() {
        out.push_str(&format!("{t},{s},{p}"));
        if let Some(truth) = truth {
            out.push_str(&format!(",{}", truth[t]));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Resolves a threshold, calibrating on `truth` when it is [`Threshold::Auto`].
pub fn resolve_threshold(
    threshold: Threshold,
    scores: &[f64],
    truth: Option<&[u32]>,
) -> Result<f64> {
    match threshold {
        Threshold::Fixed(t) => Ok(t),
        Threshold::Auto => {
            let truth = truth.ok_or_else(|| {
                Error::config("automatic threshold needs a labelled calibration series")
            })?;
            Ok(threshold_sweep(scores, truth, AUTO_THRESHOLD_POINTS)?
                .best
                .threshold)
        }
    }
}

impl ClassSeries {
    /// Scores every window with `scorer` and spreads the result onto steps.
    pub fn from_scorer<S: WindowScorer + ?Sized>(
        class_id: u32,
        scorer: &S,
        windows: &WindowSet,
        aggregation: Aggregation,
        exec: Exec,
    ) -> Result<Self> {
        let window_scores = score_windows(scorer, &windows.windows, exec)?;
        let step_scores = aggregate_steps(
            &window_scores,
            &windows.starts,
            windows.config.w,
            windows.source_len,
            aggregation,
        )?;
        Ok(Self {
            class_id,
            window_scores,
            parts: Vec::new(),
            latents: Vec::new(),
            step_scores,
        })
    }

    /// GAN scoring, keeping both error terms and the inverted latents.
    pub fn from_gan(
        class_id: u32,
        scorer: &GanScorer<'_>,
        windows: &WindowSet,
        aggregation: Aggregation,
        exec: Exec,
    ) -> Result<Self> {
        let scored: Vec<WindowScore> = exec
            .map(&windows.windows, |i, w| scorer.score_full(i, w))
            .into_iter()
            .collect::<Result<_>>()?;
        let window_scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
        let step_scores = aggregate_steps(
            &window_scores,
            &windows.starts,
            windows.config.w,
            windows.source_len,
            aggregation,
        )?;
        let (parts, latents) = scored.into_iter().map(|s| (s.parts, s.latent)).unzip();
        Ok(Self {
            class_id,
            window_scores,
            parts,
            latents,
            step_scores,
        })
    }
}

/// Combines per-class step scores into one labelled series.
///
/// `truth` holds per-step labels; it is required when the threshold is automatic.
pub fn assemble(
    classes: Vec<ClassSeries>,
    threshold: Threshold,
    truth: Option<&[u32]>,
) -> Result<ScoreSeries> {
    let class_scores: Vec<ClassScores> = classes
        .iter()
        .map(|c| ClassScores {
            class_id: c.class_id,
            scores: c.step_scores.clone(),
        })
        .collect();
    if class_scores.is_empty() {
        return Err(Error::config("no class models supplied"));
    }
    let step_scores = min_scores(&class_scores);
    if let Some(truth) = truth {
        if truth.len() != step_scores.len() {
            return Err(Error::contract(format!(
                "{} labels for {} scored steps",
                truth.len(),
                step_scores.len()
            )));
        }
    }
    let threshold = resolve_threshold(threshold, &step_scores, truth)?;
    let predicted = classify(&class_scores, threshold)?;
    Ok(ScoreSeries {
        classes,
        step_scores,
        predicted,
        truth: truth.map(<[u32]>::to_vec),
        threshold,
    })
}

/// One trained model per device type.
pub struct Detector<'a> {
    pub models: Vec<(u32, &'a GanModel)>,
    pub config: ScoreConfig,
}

impl Detector<'_> {
    /// Scores normalized test windows against every class model and labels each step.
    pub fn detect(
        &self,
        windows: &WindowSet,
        truth: Option<&[u32]>,
        exec: Exec,
    ) -> Result<ScoreSeries> {
        self.config.validate()?;
        if self.models.is_empty() {
            return Err(Error::config("no class models supplied"));
        }
        let classes = self
            .models
            .iter()
            .map(|&(class_id, model)| {
                let scorer = GanScorer {
                    model,
                    lambda: self.config.lambda,
                    inversion: self.config.inversion,
                };
                ClassSeries::from_gan(class_id, &scorer, windows, self.config.aggregation, exec)
            })
            .collect::<Result<Vec<_>>>()?;
        assemble(classes, self.config.threshold, truth)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GanDims;
    use proptest::prelude::*;

    fn model() -> GanModel {
        GanModel::init(
            21,
            GanDims {
                window: 6,
                features: 2,
                latent: 2,
                hidden: 6,
            },
        )
        .unwrap()
    }

    fn latent(seed: u64) -> Tensor {
        sample_latents(&mut ChaCha8Rng::seed_from_u64(seed), 1, 6, 2).remove(0)
    }

    #[test]
    fn direct_score_arithmetic() {
        let parts = ScoreParts {
            reconstruction: 2.0,
            discrimination: 0.4,
        };
        assert!((parts.blend(0.5) - 1.2).abs() < 1e-15);
        assert_eq!(parts.blend(1.0), 2.0);
    }

    #[test]
    fn perfect_reconstruction_scores_zero() {
        let m = model();
        let z = latent(3);
        let y = m.generate(&z).unwrap();
        for lambda in [0.0, 0.3, 1.0] {
            assert_eq!(score_window(&m, &y, &z, lambda).unwrap(), 0.0);
        }
        assert!(score_window(&m, &y, &z, 1.5).is_err());
    }

    #[test]
    fn pure_reconstruction_at_lambda_one() {
        let m = model();
        let z = latent(4);
        let y = m.generate(&latent(5)).unwrap();
        let direct = y.sub(&m.generate(&z).unwrap()).unwrap().l2_norm();
        assert_eq!(score_window(&m, &y, &z, 1.0).unwrap(), direct);
    }

    #[test]
    fn zero_rate_returns_best_start() {
        let m = model();
        let y = m.generate(&latent(8)).unwrap();
        let cfg = InversionConfig {
            steps: 1,
            lr: 0.0,
            restarts: 4,
            seed: 77,
        };
        let inv = invert_latent(&m, &y, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        rng.set_stream(0);
        let starts = sample_latents(&mut rng, 4, 6, 2);
        let best = starts
            .iter()
            .min_by(|a, b| {
                objective(&m, &y, a)
                    .unwrap()
                    .total_cmp(&objective(&m, &y, b).unwrap())
            })
            .unwrap();
        assert_eq!(&inv.latent, best);
    }

    #[test]
    fn descent_trajectories_are_monotone() {
        let m = model();
        for seed in 0..5 {
            let y = m.generate(&latent(100 + seed)).unwrap();
            let cfg = InversionConfig {
                steps: 30,
                lr: 1e-3,
                restarts: 1,
                seed,
            };
            let inv = invert_latent(&m, &y, &cfg).unwrap();
            assert!(
                inv.trace.windows(2).all(|p| p[1] <= p[0]),
                "{:?}",
                inv.trace
            );
            assert!(inv.trace.last().unwrap() < &inv.trace[0]);
        }
    }

    #[test]
    fn inversion_is_deterministic() {
        let m = model();
        let y = m.generate(&latent(1)).unwrap();
        let cfg = InversionConfig::default();
        assert_eq!(
            invert_latent(&m, &y, &cfg).unwrap(),
            invert_latent(&m, &y, &cfg).unwrap()
        );
    }

    #[test]
    fn aggregation_examples() {
        // Disjoint windows.
        let out = aggregate_steps(&[1.0, 2.0], &[0, 3], 3, 6, Aggregation::Mean).unwrap();
        assert_eq!(out, vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        // Constant scores, with an uncovered tail.
        let out = aggregate_steps(&[4.0; 3], &[0, 2, 4], 4, 10, Aggregation::Mean).unwrap();
        assert_eq!(out, vec![4.0; 10]);
        // Overlap takes the mean.
        let out = aggregate_steps(&[1.0, 3.0], &[0, 2], 4, 6, Aggregation::Mean).unwrap();
        assert_eq!(out, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let out = aggregate_steps(&[1.0, 3.0], &[0, 2], 4, 6, Aggregation::Max).unwrap();
        assert_eq!(out, vec![1.0, 1.0, 3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn uncovered_steps_copy_nearest() {
        let out = aggregate_steps(&[1.0, 5.0], &[2, 8], 2, 12, Aggregation::Mean).unwrap();
        assert_eq!(
            out,
            vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0]
        );
        // Equidistant gap step goes left.
        let out = aggregate_steps(&[1.0, 5.0], &[0, 4], 2, 6, Aggregation::Mean).unwrap();
        assert_eq!(out, vec![1.0, 1.0, 1.0, 5.0, 5.0, 5.0]);
        assert!(aggregate_steps(&[1.0], &[5], 4, 6, Aggregation::Mean).is_err());
    }

    #[test]
    fn classify_examples() {
        let one = [ClassScores {
            class_id: 3,
            scores: vec![0.1, 0.5, 0.5000001],
        }];
        assert_eq!(classify(&one, 0.5).unwrap(), vec![3, 3, ANOMALY]);
        assert!(matches!(classify(&[], 1.0), Err(Error::Config(_))));

        let two = [
            ClassScores {
                class_id: 2,
                scores: vec![0.2, 0.1, 0.3],
            },
            ClassScores {
                class_id: 1,
                scores: vec![0.2, 0.4, 0.1],
            },
        ];
        assert_eq!(classify(&two, 1.0).unwrap(), vec![1, 2, 1]);
    }

    #[test]
    fn threshold_parsing() {
        assert_eq!("auto".parse::<Threshold>().unwrap(), Threshold::Auto);
        assert_eq!("0.25".parse::<Threshold>().unwrap(), Threshold::Fixed(0.25));
        assert!("nan".parse::<Threshold>().is_err());
        assert!("x".parse::<Threshold>().is_err());
    }

    proptest! {
        #[test]
        fn score_is_linear_in_lambda(seed in 0u64..50) {
            let m = model();
            let y = m.generate(&latent(seed)).unwrap().map(|v| v + 0.3);
            let z = latent(seed + 1000);
            let a = score_window(&m, &y, &z, 1.0).unwrap();
            let b = score_window(&m, &y, &z, 0.0).unwrap();
            let mid = score_window(&m, &y, &z, 0.5).unwrap();
            prop_assert!(a >= 0.0 && b >= 0.0);
            prop_assert!((mid - (0.5 * a + 0.5 * b)).abs() < 1e-12);
        }

        #[test]
        fn classify_shift_needs_matching_threshold_shift(
            s1 in prop::collection::vec(0.0f64..2.0, 12),
            s2 in prop::collection::vec(0.0f64..2.0, 12),
            threshold in 0.0f64..2.0,
            shift in -1.0f64..1.0,
        ) {
            let classes = [
                ClassScores { class_id: 1, scores: s1.clone() },
                ClassScores { class_id: 2, scores: s2.clone() },
            ];
            let shifted = [
                ClassScores { class_id: 1, scores: s1.iter().map(|v| v + shift).collect() },
                ClassScores { class_id: 2, scores: s2.iter().map(|v| v + shift).collect() },
            ];
            let base = classify(&classes, threshold).unwrap();
            // Argmin is unchanged; only the anomaly cut moves with the threshold.
            for t in 0..12 {
                prop_assert_eq!(min_class(&classes, t).0, min_class(&shifted, t).0);
            }
            let coupled = classify(&shifted, threshold + shift).unwrap();
            for t in 0..12 {
                let m = min_class(&classes, t).1;
                let near_cut = ((m + shift) - (threshold + shift)).abs() < 1e-12
                    || (m - threshold).abs() < 1e-12;
                if !near_cut {
                    prop_assert_eq!(base[t], coupled[t]);
                }
            }
        }

        #[test]
        fn aggregation_is_total(
            scores in prop::collection::vec(0.0f64..10.0, 1..20),
            w in 1usize..8,
            s in 1usize..8,
            tail in 0usize..10,
        ) {
            let s = s.min(w);
            let starts: Vec<usize> = (0..scores.len()).map(|i| i * s).collect();
            let n = starts.last().unwrap() + w + tail;
            let out = aggregate_steps(&scores, &starts, w, n, Aggregation::Mean).unwrap();
            prop_assert_eq!(out.len(), n);
            prop_assert!(out.iter().all(|v| v.is_finite()));
        }
    }
}
