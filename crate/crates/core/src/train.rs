//! Adversarial training on normal windows.
//!
//! Each batch runs one discriminator update followed by one generator
//! update, both plain SGD with momentum. Per-sample gradients are computed
//! on independent tapes (in parallel when enabled) and summed in sample
//! order, so a run is reproducible bit-for-bit from its seed.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{WindowSet, ANOMALY};
use crate::error::{Error, Result};
use crate::model::{GanModel, Trainable};
use crate::par::Exec;
use crate::tape::GradTape;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]` inside logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl StepDecay {
    /// `lr0 · decay_factor^⌊epoch / decay_every⌋`.
    pub fn rate(&self, lr0: f64, epoch: usize) -> f64 {
        lr0 * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub momentum: f64,
    pub scheduler: StepDecay,
    /// Every `n`-th batch is replaced by the mean of the last `n` raw batches; 0 disables.
    pub sample_average_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr_g: 0.02,
            lr_d: 0.02,
            momentum: 0.9,
            scheduler: StepDecay {
                decay_factor: 0.5,
                decay_every: 10,
            },
            sample_average_every: 0,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be ≥ 1"));
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        let f = self.scheduler.decay_factor;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::config(format!("decay factor {f} outside (0, 1]")));
        }
        if self.scheduler.decay_every == 0 {
            return Err(Error::config("decay_every must be ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStep {
    pub step: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
    pub lr_g: f64,
    pub lr_d: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<TrainStep>,
}

impl TrainLog {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("step,d_loss,g_loss,d_real_mean,d_fake_mean,lr_g,lr_d\n");
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.step, s.d_loss, s.g_loss, s.d_real_mean, s.d_fake_mean, s.lr_g, s.lr_d
            ));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

/// Discriminator loss with gradients for every discriminator parameter.
#[derive(Clone, Debug)]
pub struct DiscriminatorStep {
    pub loss: f64,
    pub real_mean: f64,
    pub fake_mean: f64,
    pub grads: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct GeneratorStep {
    pub loss: f64,
    pub fake_mean: f64,
    pub grads: Vec<Tensor>,
}

fn neg_log(tape: &mut GradTape, p: crate::tape::Var) -> crate::tape::Var {
    let l = tape.ln_clamped(p, PROB_EPS, 1.0 - PROB_EPS);
    tape.scale(l, -1.0)
}

fn sum_grads(parts: Vec<Vec<Tensor>>) -> Option<Vec<Tensor>> {
    let mut iter = parts.into_iter();
    let mut acc = iter.next()?;
    for part in iter {
        for (a, g) in acc.iter_mut().zip(&part) {
            a.add_assign(g);
        }
    }
    Some(acc)
}

fn non_empty<T>(batch: &[T], what: &str) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::contract(format!("{what} batch is empty")));
    }
    Ok(())
}

/// `−mean log D(x) − mean log(1 − D(G(z)))` and its gradient in the discriminator.
pub fn d_loss_grad(
    model: &GanModel,
    x_batch: &[Tensor],
    z_batch: &[Tensor],
    exec: Exec,
) -> Result<DiscriminatorStep> {
    non_empty(x_batch, "real")?;
    non_empty(z_batch, "latent")?;
    let (nx, nz) = (x_batch.len() as f64, z_batch.len() as f64);

    let real = exec.map(x_batch, |_, x| -> Result<(f64, f64, Vec<Tensor>)> {
        model.validate_window(x)?;
        let mut tape = GradTape::new();
        let m = model.bind(&mut tape, Trainable::Discriminator);
        let xv = tape.constant(x.clone());
        let p = m.discriminate(&mut tape, xv)?;
        let nl = neg_log(&mut tape, p);
        let loss = tape.scale(nl, 1.0 / nx);
        let mut grads = tape.backward(loss)?;
        let g = m
            .discriminator
            .params()
            .into_iter()
            .map(|v| grads.take(v))
            .collect();
        Ok((tape.value(loss).item(), tape.value(p).item(), g))
    });
    let fake = exec.map(z_batch, |_, z| -> Result<(f64, f64, Vec<Tensor>)> {
        model.validate_latent(z)?;
        let mut tape = GradTape::new();
        let m = model.bind(&mut tape, Trainable::Discriminator);
        let zv = tape.constant(z.clone());
        let x = m.generate(&mut tape, zv)?;
        let p = m.discriminate(&mut tape, x)?;
        let one_minus = tape.affine(p, -1.0, 1.0);
        let nl = neg_log(&mut tape, one_minus);
        let loss = tape.scale(nl, 1.0 / nz);
        let mut grads = tape.backward(loss)?;
        let g = m
            .discriminator
            .params()
            .into_iter()
            .map(|v| grads.take(v))
            .collect();
        Ok((tape.value(loss).item(), tape.value(p).item(), g))
    });

    let mut loss = 0.0;
    let (mut real_sum, mut fake_sum) = (0.0, 0.0);
    let mut parts = Vec::with_capacity(x_batch.len() + z_batch.len());
    for r in real {
        let (l, p, g) = r?;
        loss += l;
        real_sum += p;
        parts.push(g);
    }
    for r in fake {
        let (l, p, g) = r?;
        loss += l;
        fake_sum += p;
        parts.push(g);
    }
    Ok(DiscriminatorStep {
        loss,
        real_mean: real_sum / nx,
        fake_mean: fake_sum / nz,
        grads: sum_grads(parts).expect("batches are non-empty"),
    })
}

/// Non-saturating generator loss `−mean log D(G(z))` and its gradient in the generator.
pub fn g_loss_grad(model: &GanModel, z_batch: &[Tensor], exec: Exec) -> Result<GeneratorStep> {
    non_empty(z_batch, "latent")?;
    let nz = z_batch.len() as f64;
    let per_sample = exec.map(z_batch, |_, z| -> Result<(f64, f64, Vec<Tensor>)> {
        model.validate_latent(z)?;
        let mut tape = GradTape::new();
        let m = model.bind(&mut tape, Trainable::Generator);
        let zv = tape.constant(z.clone());
        let x = m.generate(&mut tape, zv)?;
        let p = m.discriminate(&mut tape, x)?;
        let nl = neg_log(&mut tape, p);
        let loss = tape.scale(nl, 1.0 / nz);
        let mut grads = tape.backward(loss)?;
        let g = m
            .generator
            .params()
            .into_iter()
            .map(|v| grads.take(v))
            .collect();
        Ok((tape.value(loss).item(), tape.value(p).item(), g))
    });
    let mut loss = 0.0;
    let mut fake_sum = 0.0;
    let mut parts = Vec::with_capacity(z_batch.len());
    for r in per_sample {
        let (l, p, g) = r?;
        loss += l;
        fake_sum += p;
        parts.push(g);
    }
    Ok(GeneratorStep {
        loss,
        fake_mean: fake_sum / nz,
        grads: sum_grads(parts).expect("batch is non-empty"),
    })
}

pub fn d_loss(model: &GanModel, x_batch: &[Tensor], z_batch: &[Tensor]) -> Result<f64> {
    non_empty(x_batch, "real")?;
    non_empty(z_batch, "latent")?;
    let clamp = |p: f64| p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let mut real = 0.0;
    for x in x_batch {
        real -= clamp(model.discriminate(x)?).ln();
    }
    let mut fake = 0.0;
    for z in z_batch {
        fake -= clamp(1.0 - model.discriminate(&model.generate(z)?)?).ln();
    }
    Ok(real / x_batch.len() as f64 + fake / z_batch.len() as f64)
}

pub fn g_loss(model: &GanModel, z_batch: &[Tensor]) -> Result<f64> {
    non_empty(z_batch, "latent")?;
    let mut total = 0.0;
    for z in z_batch {
        total -= model
            .discriminate(&model.generate(z)?)?
            .clamp(PROB_EPS, 1.0 - PROB_EPS)
            .ln();
    }
    Ok(total / z_batch.len() as f64)
}

/// Heavy-ball SGD: `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Clone, Debug)]
pub struct Momentum {
    velocity: Vec<Tensor>,
    momentum: f64,
}

impl Momentum {
    pub fn new(params: &[&Tensor], momentum: f64) -> Self {
        Self {
            velocity: params.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            momentum,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) {
        for ((p, v), g) in params.into_iter().zip(&mut self.velocity).zip(grads) {
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
    }
}

pub fn sample_latents(rng: &mut ChaCha8Rng, n: usize, w: usize, l: usize) -> Vec<Tensor> {
    (0..n)
        .map(|_| {
            let data = (0..w * l).map(|_| StandardNormal.sample(rng)).collect();
            Tensor::matrix(w, l, data)
        })
        .collect()
}

fn mean_batch(batches: &[Vec<Tensor>]) -> Vec<Tensor> {
    let size = batches.iter().map(Vec::len).min().unwrap_or(0);
    let n = batches.len() as f64;
    (0..size)
        .map(|i| {
            let mut acc = batches[0][i].clone();
            for b in &batches[1..] {
                acc.add_assign(&b[i]);
            }
            acc.scaled(1.0 / n)
        })
        .collect()
}

/// Number of optimizer steps one epoch takes over `n` windows.
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

pub fn train(
    mut model: GanModel,
    windows: &WindowSet,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<(GanModel, TrainLog)> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::contract("no training windows"));
    }
    if let Some(labels) = &windows.labels {
        if labels.contains(&ANOMALY) {
            return Err(Error::contract(
                "training windows must contain normal data only",
            ));
        }
    }
    let dims = model.dims;
    if windows.config.w != dims.window || windows.channels != dims.features {
        return Err(Error::shape(format!(
            "windows are {}×{}, model expects {}×{}",
            windows.config.w, windows.channels, dims.window, dims.features
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt_g = Momentum::new(&model.generator_params(), cfg.momentum);
    let mut opt_d = Momentum::new(&model.discriminator_params(), cfg.momentum);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let every = cfg.sample_average_every;

    for epoch in 0..cfg.epochs {
        let lr_g = cfg.scheduler.rate(cfg.lr_g, epoch);
        let lr_d = cfg.scheduler.rate(cfg.lr_d, epoch);
        order.shuffle(&mut rng);
        let mut recent: Vec<Vec<Tensor>> = Vec::with_capacity(every);

        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let raw: Vec<Tensor> = idx.iter().map(|&i| windows.windows[i].clone()).collect();
            let batch = if every > 1 {
                if recent.len() == every {
                    recent.remove(0);
                }
                recent.push(raw);
                if (b + 1) % every == 0 && recent.len() == every {
                    mean_batch(&recent)
                } else {
                    recent.last().expect("just pushed").clone()
                }
            } else {
                raw
            };
            let step = log.len();

            let z_d = sample_latents(&mut rng, batch.len(), dims.window, dims.latent);
            let d = d_loss_grad(&model, &batch, &z_d, exec)?;
            if !d.loss.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    what: format!("discriminator loss {}", d.loss),
                });
            }
            opt_d.step(model.discriminator_params_mut(), &d.grads, lr_d);

            let z_g = sample_latents(&mut rng, batch.len(), dims.window, dims.latent);
            let g = g_loss_grad(&model, &z_g, exec)?;
            if !g.loss.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    what: format!("generator loss {}", g.loss),
                });
            }
            opt_g.step(model.generator_params_mut(), &g.grads, lr_g);
            if !model.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    what: "model parameters".into(),
                });
            }

            log.steps.push(TrainStep {
                step,
                d_loss: d.loss,
                g_loss: g.loss,
                d_real_mean: d.real_mean,
                d_fake_mean: d.fake_mean,
                lr_g,
                lr_d,
            });
        }
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, TimeSeries, WindowConfig};
    use crate::model::GanDims;

    fn tiny() -> GanModel {
        GanModel::init(
            3,
            GanDims {
                window: 4,
                features: 2,
                latent: 2,
                hidden: 3,
            },
        )
        .unwrap()
    }

    fn sine_windows(n: usize, w: usize, k: usize) -> WindowSet {
        let len = n + w - 1;
        let values = (0..len * k)
            .map(|i| ((i / k) as f64 * 0.3 + (i % k) as f64).sin())
            .collect();
        let ts = TimeSeries::new(values, k, Some(vec![1; len]), None).unwrap();
        make_windows(&ts, WindowConfig { w, s: 1 }).unwrap()
    }

    #[test]
    fn scheduler_is_exact() {
        let s = StepDecay {
            decay_factor: 0.7,
            decay_every: 3,
        };
        for e in 0..20 {
            assert_eq!(s.rate(0.1, e), 0.1 * 0.7f64.powi((e / 3) as i32));
        }
        assert_eq!(s.rate(0.1, 2), 0.1);
    }

    #[test]
    fn empty_batches_are_contract_errors() {
        let m = tiny();
        let z = sample_latents(&mut ChaCha8Rng::seed_from_u64(0), 2, 4, 2);
        assert!(matches!(d_loss(&m, &[], &z), Err(Error::Contract(_))));
        assert!(matches!(g_loss(&m, &[]), Err(Error::Contract(_))));
        assert!(matches!(
            d_loss_grad(&m, &[], &z, Exec::Sequential),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn half_discriminator_gives_closed_form_losses() {
        let mut m = tiny();
        for t in m.discriminator_params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let xs = sine_windows(3, 4, 2).windows;
        let z = sample_latents(&mut ChaCha8Rng::seed_from_u64(1), 3, 4, 2);
        assert!((d_loss(&m, &xs, &z).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((g_loss(&m, &z).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_discriminator_losses_approach_zero() {
        let mut m = tiny();
        for t in m.discriminator_params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        // D ≡ σ(+40) ≈ 1: real term → 0, generator term → 0.
        m.discriminator.head.b.data_mut()[0] = 40.0;
        let z = sample_latents(&mut ChaCha8Rng::seed_from_u64(1), 3, 4, 2);
        let g = g_loss(&m, &z).unwrap();
        assert!(g >= 0.0 && g < 1e-6);

        // Perfect D needs D(x) → 1 and D(G(z)) → 0; check each clamped term separately.
        let xs = sine_windows(2, 4, 2).windows;
        let real_only = -(m
            .discriminate(&xs[0])
            .unwrap()
            .clamp(PROB_EPS, 1.0 - PROB_EPS))
        .ln();
        assert!(real_only > 0.0 && real_only < 1e-6);
        m.discriminator.head.b.data_mut()[0] = -40.0;
        let fake_only = -(1.0 - m.discriminate(&m.generate(&z[0]).unwrap()).unwrap())
            .clamp(PROB_EPS, 1.0 - PROB_EPS)
            .ln();
        assert!(fake_only > 0.0 && fake_only < 1e-6);
    }

    #[test]
    fn zero_epochs_returns_model_unchanged() {
        let m = tiny();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (out, log) = train(m.clone(), &sine_windows(10, 4, 2), &cfg, Exec::Sequential).unwrap();
        assert_eq!(out, m);
        assert!(log.is_empty());
    }

    #[test]
    fn rejects_anomalous_training_data() {
        let mut ws = sine_windows(5, 4, 2);
        ws.labels.as_mut().unwrap()[2] = ANOMALY;
        assert!(matches!(
            train(tiny(), &ws, &TrainConfig::default(), Exec::Sequential),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn log_length_matches_step_count() {
        let ws = sine_windows(23, 4, 2);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 5,
            sample_average_every: 2,
            ..TrainConfig::default()
        };
        let (_, log) = train(tiny(), &ws, &cfg, Exec::Sequential).unwrap();
        assert_eq!(log.len(), 3 * steps_per_epoch(23, 5));
        assert_eq!(log.len(), 15);
        assert!(log
            .steps
            .iter()
            .all(|s| s.d_loss.is_finite() && s.g_loss.is_finite()));
    }

    #[test]
    fn training_is_deterministic_across_exec_modes() {
        let ws = sine_windows(12, 4, 2);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (a, la) = train(tiny(), &ws, &cfg, Exec::Sequential).unwrap();
        let (b, lb) = train(tiny(), &ws, &cfg, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn mean_batch_averages_elementwise() {
        let a = vec![Tensor::filled(&[2, 1], 1.0), Tensor::filled(&[2, 1], 2.0)];
        let b = vec![Tensor::filled(&[2, 1], 3.0)];
        let out = mean_batch(&[a, b]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].data(), &[2.0, 2.0]);
    }

    #[test]
    fn log_csv_has_expected_header() {
        let (_, log) = train(
            tiny(),
            &sine_windows(6, 4, 2),
            &TrainConfig {
                epochs: 1,
                batch_size: 3,
                ..TrainConfig::default()
            },
            Exec::Sequential,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        log.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next(),
            Some("step,d_loss,g_loss,d_real_mean,d_fake_mean,lr_g,lr_d")
        );
        assert_eq!(lines.count(), 2);
    }
}
