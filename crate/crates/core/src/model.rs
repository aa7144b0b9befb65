//! Generator and discriminator, each built around one residual
//! single-head self-attention block over the time axis.
//!
//! ```text
//! G(z) = out( tanh( ffn( attn( in(z) + P ) ) ) )          z: w × L → w × K
//! D(x) = σ( head( mean_t tanh( ffn( attn( in(x) + P ) ) ) ) )  x: w × K → (0, 1)
//! attn(x) = x + softmax(Q Kᵀ / √h) V Wₒ + bₒ
//! ```
//!
//! `P` is a fixed sinusoidal position table (`w × h`). Without it the
//! attention block is permutation-equivariant and the mean-pooled
//! discriminator could not tell a window from any reordering of its steps.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ByteReader;
use crate::error::{Error, Result};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

/// Network sizes: window length `w`, feature count `k`, latent width per step, hidden width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GanDims {
    pub window: usize,
    pub features: usize,
    pub latent: usize,
    pub hidden: usize,
}

impl GanDims {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.features == 0 || self.latent == 0 || self.hidden == 0 {
            return Err(Error::config(format!(
                "all model dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            w: Tensor::matrix(fan_in, fan_out, data),
            b: Tensor::zeros(&[1, fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Tensor::zeros(&[fan_in, fan_out]),
            b: Tensor::zeros(&[1, fan_out]),
        }
    }

    fn bind(&self, tape: &mut GradTape, trainable: bool) -> LinearVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        LinearVars {
            w: put(&self.w),
            b: put(&self.b),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl LinearVars {
    pub fn apply(&self, tape: &mut GradTape, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, self.w)?;
        tape.add_row(xw, self.b)
    }
}

/// Query, key, value and output maps of one attention head.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl Attention {
    fn init(rng: &mut ChaCha8Rng, h: usize) -> Self {
        Self {
            query: Linear::init(rng, h, h),
            key: Linear::init(rng, h, h),
            value: Linear::init(rng, h, h),
            output: Linear::init(rng, h, h),
        }
    }

    pub fn zeros(h: usize) -> Self {
        Self {
            query: Linear::zeros(h, h),
            key: Linear::zeros(h, h),
            value: Linear::zeros(h, h),
            output: Linear::zeros(h, h),
        }
    }

    fn layers(&self) -> [&Linear; 4] {
        [&self.query, &self.key, &self.value, &self.output]
    }

    fn layers_mut(&mut self) -> [&mut Linear; 4] {
        [
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.output,
        ]
    }

    fn bind(&self, tape: &mut GradTape, trainable: bool) -> AttentionVars {
        AttentionVars {
            query: self.query.bind(tape, trainable),
            key: self.key.bind(tape, trainable),
            value: self.value.bind(tape, trainable),
            output: self.output.bind(tape, trainable),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub query: LinearVars,
    pub key: LinearVars,
    pub value: LinearVars,
    pub output: LinearVars,
}

/// Residual self-attention over the rows of `x` (`w × h`).
///
/// Returns the block output and the `w × w` attention weights.
pub fn attention_block(tape: &mut GradTape, x: Var, params: &AttentionVars) -> Result<(Var, Var)> {
    let h = tape.value(x).cols();
    let q = params.query.apply(tape, x)?;
    let k = params.key.apply(tape, x)?;
    let v = params.value.apply(tape, x)?;
    let logits = tape.matmul_t(q, k)?;
    let logits = tape.scale(logits, 1.0 / (h as f64).sqrt());
    let weights = tape.softmax_rows(logits);
    let mixed = tape.matmul(weights, v)?;
    let projected = params.output.apply(tape, mixed)?;
    Ok((tape.add(x, projected)?, weights))
}

/// Tape-free [`attention_block`].
pub fn attention_forward(x: &Tensor, params: &Attention) -> Result<(Tensor, Tensor)> {
    let mut tape = GradTape::new();
    let xv = tape.constant(x.clone());
    let vars = params.bind(&mut tape, false);
    let (out, weights) = attention_block(&mut tape, xv, &vars)?;
    Ok((tape.value(out).clone(), tape.value(weights).clone()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub input: Linear,
    pub attention: Attention,
    pub ffn: Linear,
    pub output: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub input: Linear,
    pub attention: Attention,
    pub ffn: Linear,
    pub head: Linear,
}

impl Generator {
    fn layers(&self) -> Vec<&Linear> {
        let mut out = vec![&self.input];
        out.extend(self.attention.layers());
        out.extend([&self.ffn, &self.output]);
        out
    }

    fn layers_mut(&mut self) -> Vec<&mut Linear> {
        let mut out = vec![&mut self.input];
        out.extend(self.attention.layers_mut());
        out.extend([&mut self.ffn, &mut self.output]);
        out
    }

    fn bind(&self, tape: &mut GradTape, trainable: bool) -> GeneratorVars {
        GeneratorVars {
            input: self.input.bind(tape, trainable),
            attention: self.attention.bind(tape, trainable),
            ffn: self.ffn.bind(tape, trainable),
            output: self.output.bind(tape, trainable),
        }
    }
}

impl Discriminator {
    fn layers(&self) -> Vec<&Linear> {
        let mut out = vec![&self.input];
        out.extend(self.attention.layers());
        out.extend([&self.ffn, &self.head]);
        out
    }

    fn layers_mut(&mut self) -> Vec<&mut Linear> {
        let mut out = vec![&mut self.input];
        out.extend(self.attention.layers_mut());
        out.extend([&mut self.ffn, &mut self.head]);
        out
    }

    fn bind(&self, tape: &mut GradTape, trainable: bool) -> DiscriminatorVars {
        DiscriminatorVars {
            input: self.input.bind(tape, trainable),
            attention: self.attention.bind(tape, trainable),
            ffn: self.ffn.bind(tape, trainable),
            head: self.head.bind(tape, trainable),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorVars {
    pub input: LinearVars,
    pub attention: AttentionVars,
    pub ffn: LinearVars,
    pub output: LinearVars,
}

#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorVars {
    pub input: LinearVars,
    pub attention: AttentionVars,
    pub ffn: LinearVars,
    pub head: LinearVars,
}

fn linear_vars(layers: &[LinearVars]) -> Vec<Var> {
    layers.iter().flat_map(|l| [l.w, l.b]).collect()
}

impl GeneratorVars {
    /// Parameter handles in checkpoint order.
    pub fn params(&self) -> Vec<Var> {
        let a = &self.attention;
        linear_vars(&[
            self.input,
            a.query,
            a.key,
            a.value,
            a.output,
            self.ffn,
            self.output,
        ])
    }
}

impl DiscriminatorVars {
    pub fn params(&self) -> Vec<Var> {
        let a = &self.attention;
        linear_vars(&[
            self.input, a.query, a.key, a.value, a.output, self.ffn, self.head,
        ])
    }
}

/// Which network's parameters enter a tape as trainable leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Neither,
    Generator,
    Discriminator,
}

/// Both networks bound onto one tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundModel {
    pub generator: GeneratorVars,
    pub discriminator: DiscriminatorVars,
    positions: Var,
}

impl BoundModel {
    pub fn generate(&self, tape: &mut GradTape, z: Var) -> Result<Var> {
        let g = &self.generator;
        let h = g.input.apply(tape, z)?;
        let h = tape.add(h, self.positions)?;
        let (h, _) = attention_block(tape, h, &g.attention)?;
        let h = g.ffn.apply(tape, h)?;
        let h = tape.tanh(h);
        g.output.apply(tape, h)
    }

    /// Realness probability as a `1 × 1` tensor.
    pub fn discriminate(&self, tape: &mut GradTape, x: Var) -> Result<Var> {
        let d = &self.discriminator;
        let h = d.input.apply(tape, x)?;
        let h = tape.add(h, self.positions)?;
        let (h, _) = attention_block(tape, h, &d.attention)?;
        let h = d.ffn.apply(tape, h)?;
        let h = tape.tanh(h);
        let pooled = tape.mean_rows(h);
        let logit = d.head.apply(tape, pooled)?;
        Ok(tape.sigmoid(logit))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanModel {
    pub dims: GanDims,
    pub generator: Generator,
    pub discriminator: Discriminator,
    positions: Tensor,
}

/// Sinusoidal position table, `w × h`.
pub fn position_table(w: usize, h: usize) -> Tensor {
    let mut data = vec![0.0; w * h];
    for t in 0..w {
        for j in 0..h {
            let pair = (j / 2) as f64;
            let angle = t as f64 / 10_000f64.powf(2.0 * pair / h as f64);
            data[t * h + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(w, h, data)
}

impl GanModel {
    /// Xavier-uniform weights, zero biases; deterministic per seed.
    pub fn init(seed: u64, dims: GanDims) -> Result<Self> {
        dims.validate()?;
        let GanDims {
            window: w,
            features: k,
            latent: l,
            hidden: h,
        } = dims;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let generator = Generator {
            input: Linear::init(&mut rng, l, h),
            attention: Attention::init(&mut rng, h),
            ffn: Linear::init(&mut rng, h, h),
            output: Linear::init(&mut rng, h, k),
        };
        let discriminator = Discriminator {
            input: Linear::init(&mut rng, k, h),
            attention: Attention::init(&mut rng, h),
            ffn: Linear::init(&mut rng, h, h),
            head: Linear::init(&mut rng, h, 1),
        };
        Ok(Self {
            dims,
            generator,
            discriminator,
            positions: position_table(w, h),
        })
    }

    pub fn bind(&self, tape: &mut GradTape, trainable: Trainable) -> BoundModel {
        let generator = self.generator.bind(tape, trainable == Trainable::Generator);
        let discriminator = self
            .discriminator
            .bind(tape, trainable == Trainable::Discriminator);
        let positions = tape.constant(self.positions.clone());
        BoundModel {
            generator,
            discriminator,
            positions,
        }
    }

    pub fn generator_params(&self) -> Vec<&Tensor> {
        self.generator
            .layers()
            .into_iter()
            .flat_map(|l| [&l.w, &l.b])
            .collect()
    }

    pub fn discriminator_params(&self) -> Vec<&Tensor> {
        self.discriminator
            .layers()
            .into_iter()
            .flat_map(|l| [&l.w, &l.b])
            .collect()
    }

    pub fn generator_params_mut(&mut self) -> Vec<&mut Tensor> {
        self.generator
            .layers_mut()
            .into_iter()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }

    pub fn discriminator_params_mut(&mut self) -> Vec<&mut Tensor> {
        self.discriminator
            .layers_mut()
            .into_iter()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }

    /// Every parameter tensor, generator first, in checkpoint order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = self.generator_params();
        out.extend(self.discriminator_params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self
            .generator
            .layers_mut()
            .into_iter()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect();
        out.extend(
            self.discriminator
                .layers_mut()
                .into_iter()
                .flat_map(|l| [&mut l.w, &mut l.b]),
        );
        out
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|t| t.is_finite())
    }

    fn check_latent(&self, z: &Tensor) -> Result<()> {
        let want = [self.dims.window, self.dims.latent];
        if z.shape() != want {
            return Err(Error::shape(format!(
                "latent window must be {want:?}, got {:?}",
                z.shape()
            )));
        }
        Ok(())
    }

    fn check_window(&self, x: &Tensor) -> Result<()> {
        let want = [self.dims.window, self.dims.features];
        if x.shape() != want {
            return Err(Error::shape(format!(
                "data window must be {want:?}, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// `G(z)`: a `w × L` latent window to a `w × K` data window.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        self.check_latent(z)?;
        let mut tape = GradTape::new();
        let m = self.bind(&mut tape, Trainable::Neither);
        let zv = tape.constant(z.clone());
        let out = m.generate(&mut tape, zv)?;
        Ok(tape.value(out).clone())
    }

    /// `D(x)` in `(0, 1)`.
    pub fn discriminate(&self, x: &Tensor) -> Result<f64> {
        self.check_window(x)?;
        let mut tape = GradTape::new();
        let m = self.bind(&mut tape, Trainable::Neither);
        let xv = tape.constant(x.clone());
        let out = m.discriminate(&mut tape, xv)?;
        Ok(tape.value(out).item())
    }

    pub fn validate_latent(&self, z: &Tensor) -> Result<()> {
        self.check_latent(z)
    }

    pub fn validate_window(&self, x: &Tensor) -> Result<()> {
        self.check_window(x)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Checkpoint bytes: magic `SATG`, version `u16`, `(w, K, L, h)` as `u32`,
    /// then every parameter tensor in [`GanModel::params`] order as `f64`.
    /// All little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n: usize = self.params().iter().map(|t| t.len()).sum();
        let mut buf = Vec::with_capacity(22 + 8 * n);
        buf.extend_from_slice(&CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for d in [
            self.dims.window,
            self.dims.features,
            self.dims.latent,
            self.dims.hidden,
        ] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for t in self.params() {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let mut dim = |what| r.u32(what).map(|v| v as usize);
        let dims = GanDims {
            window: dim("window")?,
            features: dim("features")?,
            latent: dim("latent")?,
            hidden: dim("hidden")?,
        };
        dims.validate()?;
        let mut model = Self::init(0, dims)?;
        for t in model.params_mut() {
            for v in t.data_mut() {
                *v = r.f64("parameters")?;
            }
        }
        if r.remaining() != 0 {
            return Err(Error::Truncated(format!(
                "{} unexpected trailing bytes",
                r.remaining()
            )));
        }
        Ok(model)
    }
}

const CHECKPOINT_MAGIC: [u8; 4] = *b"SATG";
const CHECKPOINT_VERSION: u16 = 1;
