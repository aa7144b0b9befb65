//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`GradTape`] records every primitive applied to its variables in
//! evaluation order. [`GradTape::backward`] walks the record once in reverse,
//! accumulating `∂loss/∂node` into each input. Nodes that cannot reach a
//! trainable leaf are never visited, so constants (model weights during
//! latent inversion, for instance) cost nothing on the way back.
//!
//! ```
//! use satad_core::{GradTape, Tensor};
//!
//! let mut tape = GradTape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).item(), 6.0);
//! ```

use crate::error::{Error, Result};
use crate::tensor::{matmul_kernel, matmul_t_kernel, sigmoid, Tensor};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    SoftmaxRows(Var),
    MeanRows(Var),
    Sum(Var),
    SumSquares(Var),
    L2Norm(Var),
    LnClamped(Var, f64, f64),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default, Debug)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// `∂loss/∂var`; a zero tensor when `var` did not influence the loss.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let rg = self.needs(&[a]);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let rg = self.needs(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(a, b, value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        Ok(self.binary(a, b, value, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.binary(a, b, value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.binary(a, b, value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.binary(a, b, value, Op::Mul(a, b)))
    }

    /// Adds the `1 × q` row `bias` to every row of the `p × q` matrix `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let q = av.cols();
        if bv.len() != q {
            return Err(Error::shape(format!(
                "row bias of length {} does not match {} columns",
                bv.len(),
                q
            )));
        }
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(q) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.binary(a, bias, out, Op::AddRow(a, bias)))
    }

    /// `alpha · a + beta`.
    pub fn affine(&mut self, a: Var, alpha: f64, beta: f64) -> Var {
        let value = self.value(a).map(|v| alpha * v + beta);
        self.unary(a, value, Op::Affine(a, alpha))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.affine(a, c, 0.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).tanh();
        self.unary(a, value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.unary(a, value, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).relu();
        self.unary(a, value, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_rows();
        self.unary(a, value, Op::SoftmaxRows(a))
    }

    /// Column means: `p × q → 1 × q`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (p, q) = (av.rows(), av.cols());
        let mut out = vec![0.0; q];
        for row in av.data().chunks(q) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= p as f64;
        }
        let value = Tensor::matrix(1, q, out);
        self.unary(a, value, Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.unary(a, value, Op::Sum(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum_squares());
        self.unary(a, value, Op::SumSquares(a))
    }

    pub fn l2_norm(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).l2_norm());
        self.unary(a, value, Op::L2Norm(a))
    }

    /// `ln(clamp(a, lo, hi))`; the gradient is zero where the clamp is active.
    pub fn ln_clamped(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|v| v.clamp(lo, hi).ln());
        self.unary(a, value, Op::LnClamped(a, lo, hi))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = loss.0 + 1;
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::filled(self.nodes[loss.0].value.shape(), 1.0));

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes[..n]
                .iter()
                .map(|node| node.value.shape().to_vec())
                .collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, contrib: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let wants = |v: Var| self.nodes[v.0].requires_grad;

        match node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (p, q, r) = (av.rows(), av.cols(), bv.cols());
                if wants(a) {
                    // dA = G · Bᵀ
                    send(
                        a,
                        Tensor::matrix(p, q, matmul_t_kernel(g.data(), bv.data(), p, r, q)),
                    );
                }
                if wants(b) {
                    // dB = Aᵀ · G
                    send(b, av.t_matmul(g).expect("shapes checked on record"));
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (p, q, r) = (av.rows(), av.cols(), bv.rows());
                if wants(a) {
                    // dA = G · B
                    send(
                        a,
                        Tensor::matrix(p, q, matmul_kernel(g.data(), bv.data(), p, r, q)),
                    );
                }
                if wants(b) {
                    // dB = Gᵀ · A
                    send(b, g.t_matmul(av).expect("shapes checked on record"));
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    send(a, g.clone());
                }
                if wants(b) {
                    send(b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    send(a, g.clone());
                }
                if wants(b) {
                    send(b, g.scaled(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    send(a, g.zip_map(val(b), |x, y| x * y));
                }
                if wants(b) {
                    send(b, g.zip_map(val(a), |x, y| x * y));
                }
            }
            Op::AddRow(a, bias) => {
                if wants(a) {
                    send(a, g.clone());
                }
                if wants(bias) {
                    let q = g.cols();
                    let mut col_sums = vec![0.0; q];
                    for row in g.data().chunks(q) {
                        for (s, v) in col_sums.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    let shape = val(bias).shape().to_vec();
                    send(
                        bias,
                        Tensor::new(shape, col_sums).expect("bias length checked"),
                    );
                }
            }
            Op::Affine(a, alpha) => send(a, g.scaled(alpha)),
            Op::Tanh(a) => send(a, g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y))),
            Op::Sigmoid(a) => send(a, g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y))),
            Op::Relu(a) => send(a, g.zip_map(val(a), |gv, x| if x > 0.0 { gv } else { 0.0 })),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let q = y.cols();
                let mut out = vec![0.0; y.len()];
                for ((o, yr), gr) in out
                    .chunks_mut(q)
                    .zip(y.data().chunks(q))
                    .zip(g.data().chunks(q))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((ov, yv), gv) in o.iter_mut().zip(yr).zip(gr) {
                        *ov = yv * (gv - dot);
                    }
                }
                send(a, Tensor::new(y.shape().to_vec(), out).expect("same shape"));
            }
            Op::MeanRows(a) => {
                let av = val(a);
                let p = av.rows() as f64;
                let mut out = Vec::with_capacity(av.len());
                for _ in 0..av.rows() {
                    out.extend(g.data().iter().map(|v| v / p));
                }
                send(
                    a,
                    Tensor::new(av.shape().to_vec(), out).expect("same shape"),
                );
            }
            Op::Sum(a) => {
                let gv = g.item();
                send(a, Tensor::filled(val(a).shape(), gv));
            }
            Op::SumSquares(a) => {
                let gv = g.item();
                send(a, val(a).map(|x| 2.0 * x * gv));
            }
            Op::L2Norm(a) => {
                let norm = node.value.item();
                let gv = g.item();
                if norm > 0.0 {
                    send(a, val(a).map(|x| x / norm * gv));
                } else {
                    send(a, Tensor::zeros(val(a).shape()));
                }
            }
            Op::LnClamped(a, lo, hi) => send(
                a,
                g.zip_map(val(a), |gv, x| if x > lo && x < hi { gv / x } else { 0.0 }),
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        assert_eq!(tape.backward(y).unwrap().wrt(x).item(), 6.0);
    }

    #[test]
    fn l2_norm_gradient() {
        let mut tape = GradTape::new();
        let v = tape.leaf(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let n = tape.l2_norm(v);
        let g = tape.backward(n).unwrap().wrt(v);
        assert!((g.data()[0] - 0.6).abs() < 1e-15);
        assert!((g.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let unused = tape.leaf(Tensor::zeros(&[2, 3]));
        let y = tape.sum_squares(x);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(unused), Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        let y = tape.tanh(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_leaf_accumulates() {
        let x0 = Tensor::new(vec![1, 3], vec![0.3, -1.2, 0.7]).unwrap();

        let single = {
            let mut tape = GradTape::new();
            let x = tape.leaf(x0.clone());
            let t = tape.tanh(x);
            let loss = tape.sum(t);
            tape.backward(loss).unwrap().wrt(x)
        };
        let double = {
            let mut tape = GradTape::new();
            let x = tape.leaf(x0.clone());
            let a = tape.tanh(x);
            let b = tape.tanh(x);
            let s = tape.add(a, b).unwrap();
            let loss = tape.sum(s);
            tape.backward(loss).unwrap().wrt(x)
        };
        for (s, d) in single.data().iter().zip(double.data()) {
            assert!((2.0 * s - d).abs() < 1e-15);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = GradTape::new();
        let w = tape.constant(Tensor::identity(2));
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(w), Tensor::zeros(&[2, 2]));
        assert_eq!(grads.wrt(x).data(), &[1.0, 1.0]);
    }

    #[test]
    fn clamped_log_has_zero_gradient_outside_range() {
        let mut tape = GradTape::new();
        let p = tape.leaf(Tensor::new(vec![3], vec![1e-9, 0.5, 1.0]).unwrap());
        let l = tape.ln_clamped(p, 1e-7, 1.0 - 1e-7);
        let loss = tape.sum(l);
        let g = tape.backward(loss).unwrap().wrt(p);
        assert_eq!(g.data(), &[0.0, 2.0, 0.0]);
        assert!(tape.value(l).is_finite());
    }
}
