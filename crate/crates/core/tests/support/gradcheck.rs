//! Reverse-mode gradients against central finite differences.
//!
//! Every check runs [`INSTANCES`] seeded random instances and returns the
//! worst norm-wise relative error it saw.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use satad_core::model::{attention_block, AttentionVars, LinearVars, Trainable};
use satad_core::train::{d_loss, d_loss_grad, g_loss, g_loss_grad};
use satad_core::{Exec, GanDims, GanModel, GradTape, Result, Tensor, Var};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 100;

pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    // Floor keeps exactly-zero gradients (key biases under softmax shift
    // invariance) from dividing rounding noise by ~0.
    diff / norm(analytic).max(norm(numeric)).max(1e-6)
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Magnitudes in `[lo, hi)` with random signs, clear of kinks at 0.
fn random_signed(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let v = rng.random_range(lo..hi);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Builds a scalar from `inputs` on a fresh tape.
type Build = dyn Fn(&mut GradTape, &[Var]) -> Result<Var>;

fn eval(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut tape = GradTape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.value(out).item()
}

/// Worst relative error over every input of `build`.
fn check(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut tape = GradTape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]);
        let numeric: Vec<f64> = (0..input.len())
            .map(|j| {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += H;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= H;
                (eval(build, &plus) - eval(build, &minus)) / (2.0 * H)
            })
            .collect();
        worst = worst.max(rel_error(analytic.data(), &numeric));
    }
    worst
}

/// Reduces a matrix to a scalar through fixed random weights so every
/// output entry reaches the gradient.
fn project(tape: &mut GradTape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn shape(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5))
}

fn over_instances(seed_base: u64, mut one: impl FnMut(&mut ChaCha8Rng) -> f64) -> f64 {
    (0..INSTANCES)
        .map(|i| one(&mut ChaCha8Rng::seed_from_u64(seed_base + i)))
        .fold(0.0, f64::max)
}

fn for_instances(make: impl Fn(&mut ChaCha8Rng) -> (Box<Build>, Vec<Tensor>)) -> f64 {
    over_instances(0, |rng| {
        let (build, inputs) = make(rng);
        check(&*build, &inputs)
    })
}

fn unary(lo: f64, hi: f64, op: impl Fn(&mut GradTape, Var) -> Var + Copy + 'static) -> f64 {
    for_instances(|rng| {
        let (r, c) = shape(rng);
        let x = random_signed(rng, r, c, lo, hi);
        let w = random(rng, r, c, -1.0, 1.0);
        let build: Box<Build> = Box::new(move |tape, v| {
            let y = op(tape, v[0]);
            project(tape, y, &w)
        });
        (build, vec![x])
    })
}

fn reduction(op: impl Fn(&mut GradTape, Var) -> Var + Copy + 'static) -> f64 {
    for_instances(|rng| {
        let (r, c) = shape(rng);
        let x = random_signed(rng, r, c, 0.1, 2.0);
        let build: Box<Build> = Box::new(move |tape, v| Ok(op(tape, v[0])));
        (build, vec![x])
    })
}

fn binary(op: impl Fn(&mut GradTape, Var, Var) -> Result<Var> + Copy + 'static) -> f64 {
    for_instances(|rng| {
        let (r, c) = shape(rng);
        let a = random(rng, r, c, -2.0, 2.0);
        let b = random(rng, r, c, -2.0, 2.0);
        let w = random(rng, r, c, -1.0, 1.0);
        let build: Box<Build> = Box::new(move |tape, v| {
            let y = op(tape, v[0], v[1])?;
            project(tape, y, &w)
        });
        (build, vec![a, b])
    })
}

fn matmul(transposed: bool) -> f64 {
    for_instances(move |rng| {
        let (p, q) = shape(rng);
        let r = rng.random_range(1..5);
        let a = random(rng, p, q, -1.0, 1.0);
        let b = if transposed {
            random(rng, r, q, -1.0, 1.0)
        } else {
            random(rng, q, r, -1.0, 1.0)
        };
        let w = random(rng, p, r, -1.0, 1.0);
        let build: Box<Build> = Box::new(move |tape, v| {
            let y = if transposed {
                tape.matmul_t(v[0], v[1])?
            } else {
                tape.matmul(v[0], v[1])?
            };
            project(tape, y, &w)
        });
        (build, vec![a, b])
    })
}

fn add_row() -> f64 {
    for_instances(|rng| {
        let (r, c) = shape(rng);
        let a = random(rng, r, c, -1.0, 1.0);
        let bias = random(rng, 1, c, -1.0, 1.0);
        let w = random(rng, r, c, -1.0, 1.0);
        let build: Box<Build> = Box::new(move |tape, v| {
            let y = tape.add_row(v[0], v[1])?;
            project(tape, y, &w)
        });
        (build, vec![a, bias])
    })
}

fn mean_rows() -> f64 {
    for_instances(|rng| {
        let (r, c) = shape(rng);
        let a = random(rng, r, c, -1.0, 1.0);
        let w = random(rng, 1, c, -1.0, 1.0);
        let build: Box<Build> = Box::new(move |tape, v| {
            let y = tape.mean_rows(v[0]);
            project(tape, y, &w)
        });
        (build, vec![a])
    })
}

fn attention() -> f64 {
    for_instances(|rng| {
        let w = rng.random_range(1..5);
        let h = rng.random_range(1..4);
        let mut inputs = vec![random(rng, w, h, -1.0, 1.0)];
        for _ in 0..4 {
            inputs.push(random(rng, h, h, -0.8, 0.8));
            inputs.push(random(rng, 1, h, -0.2, 0.2));
        }
        let proj = random(rng, w, h, -1.0, 1.0);
        let build: Box<Build> = Box::new(move |tape, v| {
            let lin = |i: usize| LinearVars {
                w: v[1 + 2 * i],
                b: v[2 + 2 * i],
            };
            let vars = AttentionVars {
                query: lin(0),
                key: lin(1),
                value: lin(2),
                output: lin(3),
            };
            let (y, _) = attention_block(tape, v[0], &vars)?;
            project(tape, y, &proj)
        });
        (build, inputs)
    })
}

/// Every tape primitive, plus the attention block built from them.
pub fn primitive_checks() -> Vec<(&'static str, f64)> {
    vec![
        ("add", binary(|t, a, b| t.add(a, b))),
        ("sub", binary(|t, a, b| t.sub(a, b))),
        ("mul", binary(|t, a, b| t.mul(a, b))),
        ("matmul", matmul(false)),
        ("matmul_t", matmul(true)),
        ("add_row", add_row()),
        ("affine", unary(0.0, 2.0, |t, a| t.affine(a, 0.3, -2.0))),
        ("scale", unary(0.0, 2.0, |t, a| t.scale(a, -1.7))),
        ("tanh", unary(0.0, 3.0, |t, a| t.tanh(a))),
        ("sigmoid", unary(0.0, 4.0, |t, a| t.sigmoid(a))),
        ("relu", unary(0.01, 2.0, |t, a| t.relu(a))),
        ("softmax_rows", unary(0.0, 3.0, |t, a| t.softmax_rows(a))),
        ("mean_rows", mean_rows()),
        ("sum", reduction(|t, a| t.sum(a))),
        ("sum_squares", reduction(|t, a| t.sum_squares(a))),
        ("l2_norm", reduction(|t, a| t.l2_norm(a))),
        (
            "ln_clamped",
            // Inputs map into [0.525, 0.975], inside the clamp.
            unary(0.05, 0.95, |t, a| {
                let p = t.affine(a, 0.5, 0.5);
                t.ln_clamped(p, 1e-7, 1.0 - 1e-7)
            }),
        ),
        ("attention", attention()),
    ]
}

fn tiny_dims(rng: &mut ChaCha8Rng) -> GanDims {
    GanDims {
        window: rng.random_range(1..5),
        features: rng.random_range(1..4),
        latent: rng.random_range(1..3),
        hidden: rng.random_range(1..5),
    }
}

/// Central differences of `f` over every parameter selected by `params_mut`.
fn numeric_params(
    model: &GanModel,
    params_mut: impl Fn(&mut GanModel) -> Vec<&mut Tensor>,
    f: impl Fn(&GanModel) -> f64,
) -> Vec<f64> {
    let mut probe = model.clone();
    let counts: Vec<usize> = params_mut(&mut probe).iter().map(|t| t.len()).collect();
    let mut out = Vec::new();
    for (p, &n) in counts.iter().enumerate() {
        for j in 0..n {
            params_mut(&mut probe)[p].data_mut()[j] += H;
            let plus = f(&probe);
            params_mut(&mut probe)[p].data_mut()[j] -= 2.0 * H;
            let minus = f(&probe);
            params_mut(&mut probe)[p].data_mut()[j] += H;
            out.push((plus - minus) / (2.0 * H));
        }
    }
    out
}

fn numeric_input(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|j| {
            let (mut plus, mut minus) = (x.clone(), x.clone());
            plus.data_mut()[j] += H;
            minus.data_mut()[j] -= H;
            (f(&plus) - f(&minus)) / (2.0 * H)
        })
        .collect()
}

fn flatten(grads: &[Tensor]) -> Vec<f64> {
    grads
        .iter()
        .flat_map(|g| g.data().iter().copied())
        .collect()
}

/// Generator with respect to its latent input and to its parameters.
fn generator() -> (f64, f64) {
    let (mut worst_z, mut worst_p) = (0.0f64, 0.0f64);
    over_instances(0, |rng| {
        let dims = tiny_dims(rng);
        let model = GanModel::init(rng.random(), dims).unwrap();
        let z = random(rng, dims.window, dims.latent, -1.5, 1.5);
        let proj = random(rng, dims.window, dims.features, -1.0, 1.0);
        let objective = |m: &GanModel, z: &Tensor| m.generate(z).unwrap().mul(&proj).unwrap().sum();

        let mut tape = GradTape::new();
        let bound = model.bind(&mut tape, Trainable::Generator);
        let zv = tape.leaf(z.clone());
        let g = bound.generate(&mut tape, zv).unwrap();
        let loss = project(&mut tape, g, &proj).unwrap();
        let grads = tape.backward(loss).unwrap();

        let numeric_z = numeric_input(&z, |z| objective(&model, z));
        worst_z = worst_z.max(rel_error(grads.wrt(zv).data(), &numeric_z));
        let analytic: Vec<Tensor> = bound
            .generator
            .params()
            .into_iter()
            .map(|v| grads.wrt(v))
            .collect();
        let numeric = numeric_params(&model, |m| m.generator_params_mut(), |m| objective(m, &z));
        worst_p = worst_p.max(rel_error(&flatten(&analytic), &numeric));
        0.0
    });
    (worst_z, worst_p)
}

/// Discriminator with respect to its window input and to its parameters.
fn discriminator() -> (f64, f64) {
    let (mut worst_x, mut worst_p) = (0.0f64, 0.0f64);
    over_instances(1000, |rng| {
        let dims = tiny_dims(rng);
        let model = GanModel::init(rng.random(), dims).unwrap();
        let x = random(rng, dims.window, dims.features, -2.0, 2.0);

        let mut tape = GradTape::new();
        let bound = model.bind(&mut tape, Trainable::Discriminator);
        let xv = tape.leaf(x.clone());
        let p = bound.discriminate(&mut tape, xv).unwrap();
        let grads = tape.backward(p).unwrap();

        let numeric_x = numeric_input(&x, |x| model.discriminate(x).unwrap());
        worst_x = worst_x.max(rel_error(grads.wrt(xv).data(), &numeric_x));
        let analytic: Vec<Tensor> = bound
            .discriminator
            .params()
            .into_iter()
            .map(|v| grads.wrt(v))
            .collect();
        let numeric = numeric_params(
            &model,
            |m| m.discriminator_params_mut(),
            |m| m.discriminate(&x).unwrap(),
        );
        worst_p = worst_p.max(rel_error(&flatten(&analytic), &numeric));
        0.0
    });
    (worst_x, worst_p)
}

/// Reconstruction norm through the generator, as used by latent inversion.
fn inversion_objective() -> f64 {
    for_instances(|rng| {
        let dims = tiny_dims(rng);
        let model = GanModel::init(rng.random(), dims).unwrap();
        let z = random(rng, dims.window, dims.latent, -1.5, 1.5);
        let y = random(rng, dims.window, dims.features, -1.0, 1.0);
        let build: Box<Build> = Box::new(move |tape, v| {
            let bound = model.bind(tape, Trainable::Neither);
            let g = bound.generate(tape, v[0])?;
            let target = tape.constant(y.clone());
            let diff = tape.sub(target, g)?;
            Ok(tape.sum_squares(diff))
        });
        (build, vec![z])
    })
}

/// Batched adversarial losses against their tape-free evaluations.
fn adversarial_losses() -> (f64, f64) {
    let (mut worst_d, mut worst_g) = (0.0f64, 0.0f64);
    over_instances(2000, |rng| {
        let dims = tiny_dims(rng);
        let model = GanModel::init(rng.random(), dims).unwrap();
        let n = rng.random_range(1..4);
        let xs: Vec<Tensor> = (0..n)
            .map(|_| random(rng, dims.window, dims.features, -2.0, 2.0))
            .collect();
        let zs: Vec<Tensor> = (0..n)
            .map(|_| random(rng, dims.window, dims.latent, -1.5, 1.5))
            .collect();

        let d = d_loss_grad(&model, &xs, &zs, Exec::Sequential).unwrap();
        assert!((d.loss - d_loss(&model, &xs, &zs).unwrap()).abs() < 1e-12);
        let numeric = numeric_params(
            &model,
            |m| m.discriminator_params_mut(),
            |m| d_loss(m, &xs, &zs).unwrap(),
        );
        worst_d = worst_d.max(rel_error(&flatten(&d.grads), &numeric));

        let g = g_loss_grad(&model, &zs, Exec::Sequential).unwrap();
        assert!((g.loss - g_loss(&model, &zs).unwrap()).abs() < 1e-12);
        let numeric = numeric_params(
            &model,
            |m| m.generator_params_mut(),
            |m| g_loss(m, &zs).unwrap(),
        );
        worst_g = worst_g.max(rel_error(&flatten(&g.grads), &numeric));
        0.0
    });
    (worst_d, worst_g)
}

/// Both networks end to end, plus the losses and objective built on them.
pub fn network_checks() -> Vec<(&'static str, f64)> {
    let (gz, gp) = generator();
    let (dx, dp) = discriminator();
    let (ld, lg) = adversarial_losses();
    vec![
        ("generator wrt latent", gz),
        ("generator wrt parameters", gp),
        ("discriminator wrt window", dx),
        ("discriminator wrt parameters", dp),
        ("inversion objective wrt latent", inversion_objective()),
        ("discriminator loss", ld),
        ("generator loss", lg),
    ]
}
