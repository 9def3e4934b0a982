//! Reverse-mode differentiation over a linear tape of tensor primitives.
//!
//! Nodes are appended in evaluation order, so every node's parents precede
//! it and a single reverse sweep visits each node once. Gradients accumulate
//! (`+=`) wherever a value is consumed more than once.

use super::tensor::{as_matrix, gemm, Tensor};
use crate::error::{ensure, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Silu,
    Sigmoid,
    Tanh,
    Log,
    Square,
    Softplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Linear(Var, Var, Var),
    /// Holds `σ(pre)` from the forward pass.
    GatedSilu(Var, Var, Vec<f64>),
    RepeatRows(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf that requires gradients; zero when unreachable.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    // both branches are evaluated so the select compiles without a jump
    let e = (-x.abs()).exp();
    let r = 1.0 / (1.0 + e);
    let neg = e * r;
    if x >= 0.0 {
        r
    } else {
        neg
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn unary_forward(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Silu => x * sigmoid(x),
        Unary::Sigmoid => sigmoid(x),
        Unary::Tanh => x.tanh(),
        Unary::Log => x.ln(),
        Unary::Square => x * x,
        Unary::Softplus => softplus(x),
    }
}

/// Local derivative given input `x` and output `y`.
fn unary_derivative(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Silu => {
            // y = x·σ(x) recovers σ(x) without another exponential
            let s = if x == 0.0 { 0.5 } else { y / x };
            s * (1.0 + x * (1.0 - s))
        }
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Tanh => 1.0 - y * y,
        Unary::Log => 1.0 / x,
        Unary::Square => 2.0 * x,
        Unary::Softplus => sigmoid(x),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable input whose gradient is reported by `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Elementwise binary op. Shapes must match, or one side must be a scalar.
    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
        };
        let out = if va.shape() == vb.shape() {
            va.zip_map(vb, f)?
        } else if vb.is_scalar() {
            let s = vb.data()[0];
            va.map(|x| f(x, s))
        } else if va.is_scalar() {
            let s = va.data()[0];
            vb.map(|y| f(s, y))
        } else {
            return Err(Error::Dimension(format!(
                "cannot combine shapes {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let va = self.value(a);
        if kind == Unary::Log {
            if let Some(bad) = va.data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
                return Err(Error::Domain(format!("log of non-positive value {bad}")));
            }
        }
        let out = va.map(|x| unary_forward(kind, x));
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Unary(kind, a), rg))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Silu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Square, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Softplus, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    /// `x[b×n] + bias[n]`, adding the bias to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = as_matrix(self.value(x))?;
        let vb = self.value(bias);
        ensure!(
            vb.len() == n,
            Dimension,
            "bias of length {} for rows of width {n}",
            vb.len()
        );
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bj) in row.iter_mut().zip(b) {
                *o += bj;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    /// `x·w + bias`, fused.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (m, k) = as_matrix(self.value(x))?;
        let (k2, n) = as_matrix(self.value(w))?;
        ensure!(
            k == k2,
            Dimension,
            "linear inner extents differ: {:?} · {:?}",
            self.value(x).shape(),
            self.value(w).shape()
        );
        let vb = self.value(bias);
        ensure!(vb.len() == n, Dimension, "bias of length {} for width {n}", vb.len());
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(vb.data());
        }
        gemm(
            m,
            k,
            n,
            self.value(x).data(),
            (k as isize, 1),
            self.value(w).data(),
            (n as isize, 1),
            &mut out,
            1.0,
        );
        let rg = self.rg(&[x, w, bias]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::Linear(x, w, bias), rg))
    }

    /// `silu(pre) ⊙ gate`, fused; a single-row `gate` applies to every row.
    pub fn gated_silu(&mut self, pre: Var, gate: Var) -> Result<Var> {
        let (vp, vg) = (self.value(pre), self.value(gate));
        let (_, n) = as_matrix(vp)?;
        let broadcast = vg.len() == n && vp.len() != n;
        ensure!(
            vg.shape() == vp.shape() || broadcast,
            Dimension,
            "gate {:?} does not fit activations {:?}",
            vg.shape(),
            vp.shape()
        );
        let sig: Vec<f64> = vp.data().iter().map(|&x| sigmoid(x)).collect();
        let mut out = Vec::with_capacity(vp.len());
        for (r, (xr, sr)) in vp.data().chunks(n).zip(sig.chunks(n)).enumerate() {
            let gr = if broadcast { vg.data() } else { &vg.data()[r * n..(r + 1) * n] };
            out.extend(xr.iter().zip(sr).zip(gr).map(|((x, s), g)| x * s * g));
        }
        let out = Tensor::new(vp.shape().to_vec(), out)?;
        let rg = self.rg(&[pre, gate]);
        Ok(self.push(out, Op::GatedSilu(pre, gate, sig), rg))
    }

    /// Stacks a single row `[1×n]` (or `[n]`) into `[rows×n]`.
    pub fn repeat_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let vx = self.value(x);
        ensure!(
            vx.rows() == 1 || vx.shape().len() == 1,
            Dimension,
            "repeat_rows expects a single row, got {:?}",
            vx.shape()
        );
        ensure!(rows > 0, Dimension, "repeat_rows with zero rows");
        let n = vx.len();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(vx.data());
        }
        let out = Tensor::new([rows, n], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::RepeatRows(x), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Propagates gradients from a scalar `root` back to every leaf.
    ///
    /// Leaves created with [`Tape::param`] always receive a gradient, zero
    /// when `root` does not depend on them.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        ensure!(root.0 < self.nodes.len(), Contract, "root is not on this tape");
        let rv = &self.nodes[root.0].value;
        ensure!(
            rv.len() == 1,
            Contract,
            "backward root must be scalar, got shape {:?}",
            rv.shape()
        );

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let (m, k) = as_matrix(va)?;
                    let (_, n) = as_matrix(vb)?;
                    if self.nodes[a.0].requires_grad {
                        let ga = grads[a.0].get_or_insert_with(|| vec![0.0; m * k]);
                        // dA += dC · Bᵀ
                        gemm(m, n, k, &g, (n as isize, 1), vb.data(), (1, n as isize), ga, 1.0);
                    }
                    if self.nodes[b.0].requires_grad {
                        let gb = grads[b.0].get_or_insert_with(|| vec![0.0; k * n]);
                        // dB += Aᵀ · dC
                        gemm(k, m, n, va.data(), (1, k as isize), &g, (n as isize, 1), gb, 1.0);
                    }
                }
                Op::Binary(kind, a, b) => {
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let out_len = g.len();
                    for (side, this, other) in [(0, a, vb), (1, b, va)] {
                        if !self.nodes[this.0].requires_grad {
                            continue;
                        }
                        let this_val = &self.nodes[this.0].value;
                        let broadcast = this_val.len() != out_len;
                        let other_at = |j: usize| {
                            if other.len() == out_len {
                                other.data()[j]
                            } else {
                                other.data()[0]
                            }
                        };
                        let local = |j: usize| match kind {
                            Binary::Add => 1.0,
                            Binary::Sub => {
                                if side == 0 {
                                    1.0
                                } else {
                                    -1.0
                                }
                            }
                            Binary::Mul => other_at(j),
                        };
                        let gt = grads[this.0].get_or_insert_with(|| vec![0.0; this_val.len()]);
                        if broadcast {
                            gt[0] += g.iter().enumerate().map(|(j, gj)| gj * local(j)).sum::<f64>();
                        } else {
                            for (j, (gt_j, gj)) in gt.iter_mut().zip(&g).enumerate() {
                                *gt_j += gj * local(j);
                            }
                        }
                    }
                }
                Op::Unary(kind, a) => {
                    if self.nodes[a.0].requires_grad {
                        let x = self.nodes[a.0].value.data();
                        let y = node.value.data();
                        let ga = grads[a.0].get_or_insert_with(|| vec![0.0; x.len()]);
                        for j in 0..x.len() {
                            ga[j] += g[j] * unary_derivative(*kind, x[j], y[j]);
                        }
                    }
                }
                Op::Scale(a, factor) => {
                    if self.nodes[a.0].requires_grad {
                        let ga = grads[a.0].get_or_insert_with(|| vec![0.0; g.len()]);
                        for (gj, &v) in ga.iter_mut().zip(&g) {
                            *gj += v * factor;
                        }
                    }
                }
                Op::AddBias(x, bias) => {
                    let n = self.nodes[bias.0].value.len();
                    if self.nodes[x.0].requires_grad {
                        let gx = grads[x.0].get_or_insert_with(|| vec![0.0; g.len()]);
                        for (gj, &v) in gx.iter_mut().zip(&g) {
                            *gj += v;
                        }
                    }
                    if self.nodes[bias.0].requires_grad {
                        let gb = grads[bias.0].get_or_insert_with(|| vec![0.0; n]);
                        for row in g.chunks(n) {
                            for (gj, &v) in gb.iter_mut().zip(row) {
                                *gj += v;
                            }
                        }
                    }
                }
                Op::Linear(x, w, bias) => {
                    let vx = &self.nodes[x.0].value;
                    let vw = &self.nodes[w.0].value;
                    let (m, k) = as_matrix(vx)?;
                    let (_, n) = as_matrix(vw)?;
                    if self.nodes[x.0].requires_grad {
                        let gx = grads[x.0].get_or_insert_with(|| vec![0.0; m * k]);
                        gemm(m, n, k, &g, (n as isize, 1), vw.data(), (1, n as isize), gx, 1.0);
                    }
                    if self.nodes[w.0].requires_grad {
                        let gw = grads[w.0].get_or_insert_with(|| vec![0.0; k * n]);
                        gemm(k, m, n, vx.data(), (1, k as isize), &g, (n as isize, 1), gw, 1.0);
                    }
                    if self.nodes[bias.0].requires_grad {
                        let gb = grads[bias.0].get_or_insert_with(|| vec![0.0; n]);
                        for row in g.chunks(n) {
                            for (gj, &v) in gb.iter_mut().zip(row) {
                                *gj += v;
                            }
                        }
                    }
                }
                Op::GatedSilu(pre, gate, sig) => {
                    let vp = self.nodes[pre.0].value.data();
                    let vg = &self.nodes[gate.0].value;
                    let n = as_matrix(&self.nodes[pre.0].value)?.1;
                    let broadcast = vg.len() != vp.len();
                    let gate_row = |r: usize| if broadcast { vg.data() } else { &vg.data()[r * n..(r + 1) * n] };
                    if self.nodes[pre.0].requires_grad {
                        let gp = grads[pre.0].get_or_insert_with(|| vec![0.0; vp.len()]);
                        for (r, gpr) in gp.chunks_mut(n).enumerate() {
                            let span = r * n..(r + 1) * n;
                            let it = gpr.iter_mut().zip(&g[span.clone()]).zip(gate_row(r)).zip(&vp[span.clone()]).zip(&sig[span]);
                            for ((((d, gj), gate), x), s) in it {
                                *d += gj * gate * s * (1.0 + x * (1.0 - s));
                            }
                        }
                    }
                    if self.nodes[gate.0].requires_grad {
                        let gg = grads[gate.0].get_or_insert_with(|| vec![0.0; vg.len()]);
                        for r in 0..vp.len() / n {
                            let span = r * n..(r + 1) * n;
                            let dst = if broadcast { &mut gg[..] } else { &mut gg[span.clone()] };
                            let it = dst.iter_mut().zip(&g[span.clone()]).zip(&vp[span.clone()]).zip(&sig[span]);
                            for (((d, gj), x), s) in it {
                                *d += gj * x * s;
                            }
                        }
                    }
                }
                Op::RepeatRows(x) => {
                    if self.nodes[x.0].requires_grad {
                        let n = self.nodes[x.0].value.len();
                        let gx = grads[x.0].get_or_insert_with(|| vec![0.0; n]);
                        for row in g.chunks(n) {
                            for (gj, &v) in gx.iter_mut().zip(row) {
                                *gj += v;
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    if self.nodes[a.0].requires_grad {
                        let n = self.nodes[a.0].value.len();
                        let ga = grads[a.0].get_or_insert_with(|| vec![0.0; n]);
                        for v in ga.iter_mut() {
                            *v += g[0];
                        }
                    }
                }
            }
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => {
                    let shape = node.value.shape().to_vec();
                    Some(match g {
                        Some(data) => Tensor::new(shape, data).expect("gradient matches leaf shape"),
                        None => Tensor::zeros(shape),
                    })
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}
