//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and enough
//! context to propagate gradients. Nodes are only ever appended, so the
//! insertion order is a topological order and `backward` walks it in
//! reverse, visiting each node once.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    SubScaled(Var, Var, f64),
    AddBias(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Gelu(Var),
    GeluPrime(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
        weight: f64,
    },
    CausalConv {
        x: Var,
        kernel: Var,
    },
    Rope {
        x: Var,
        cos: Vec<f64>,
        sin: Vec<f64>,
    },
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    ConstMul {
        x: Var,
        factors: Vec<f64>,
    },
    Row {
        x: Var,
        index: usize,
    },
    Stack(Vec<Var>),
    Sum(Var),
    SumSquares(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::SubScaled(..) => "sub_scaled",
            Op::AddBias(..) => "add_bias",
            Op::MatMul { .. } => "matmul",
            Op::Gelu(..) => "gelu",
            Op::GeluPrime(..) => "gelu_prime",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::CausalConv { .. } => "causal_conv1d",
            Op::Rope { .. } => "rope",
            Op::Gather { .. } => "gather",
            Op::ConstMul { .. } => "const_mul",
            Op::Row { .. } => "row",
            Op::Stack(..) => "stack",
            Op::Sum(..) => "sum",
            Op::SumSquares(..) => "sum_squares",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A differentiation tape. Confined to one thread; replicate for parallelism.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
    fault: Option<String>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact-erf GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// d/dx GELU.
pub fn gelu_prime_scalar(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

fn gelu_second_scalar(x: f64) -> f64 {
    normal_pdf(x) * (2.0 - x * x)
}

/// Per-pair rotary frequencies `mu^(-2j/D)`.
pub fn rope_frequencies(dim: usize, mu: f64) -> Vec<f64> {
    (0..dim / 2)
        .map(|j| mu.powf(-2.0 * j as f64 / dim as f64))
        .collect()
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            check_finite: true,
            fault: None,
        }
    }

    /// Enables or disables the non-finite check run after every op.
    pub fn with_check_finite(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    /// Test hook: scales the gradient contribution of every op named `op`
    /// by 1.01 so that gradient checks can be shown to catch it.
    pub fn inject_fault(&mut self, op: impl Into<String>) {
        self.fault = Some(op.into());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| c * x);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// `a - c * b`.
    pub fn sub_scaled(&mut self, a: Var, b: Var, c: f64) -> Result<Var> {
        self.same_shape("sub_scaled", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - c * y);
        self.push(out, Op::SubScaled(a, b, c), &[a, b])
    }

    /// Adds `bias[D]` to every row of `x[.., D]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(bias).numel() != d {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(&b) {
                *o += bv;
            }
        }
        self.push(out, Op::AddBias(x, bias), &[x, bias])
    }

    fn matmul_general(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let out = gemm(self.value(a), ta, self.value(b), tb)?;
        self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_general(a, b, false, false)
    }

    /// `a · bᵀ`; with `a` holding row vectors this applies the map `b` to each row.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_general(a, b, false, true)
    }

    /// `aᵀ · b`; for two row vectors this is their outer product.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_general(a, b, true, false)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu_scalar);
        self.push(out, Op::Gelu(x), &[x])
    }

    /// Derivative of GELU, itself differentiable.
    pub fn gelu_prime(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu_prime_scalar);
        self.push(out, Op::GeluPrime(x), &[x])
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        for p in [gain, bias] {
            if self.value(p).numel() != d {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.rows();
        let mut out = Tensor::zeros(xv.shape());
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            let o = out.row_mut(r);
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                o[j] = h * g[j] + b[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let rows = self.value(logits).rows();
        self.softmax_cross_entropy_weighted(logits, targets, 1.0 / rows as f64)
    }

    /// `weight * Σ_rows -log softmax(logits)[target]`.
    pub fn softmax_cross_entropy_weighted(
        &mut self,
        logits: Var,
        targets: &[usize],
        weight: f64,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, n) = (lv.rows(), lv.last_dim());
        if targets.len() != rows {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; rows * n];
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= n {
                return Err(Error::IndexOutOfRange {
                    what: "cross-entropy target",
                    index: t,
                    bound: n,
                });
            }
            let row = lv.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                probs[r * n + j] = e;
                z += e;
            }
            for p in &mut probs[r * n..(r + 1) * n] {
                *p /= z;
            }
            total += -(row[t] - m - z.ln());
        }
        self.push(
            Tensor::scalar(weight * total),
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
                weight,
            },
            &[logits],
        )
    }

    /// Per-channel causal convolution of `x[n×D]` with `kernel[k×D]`,
    /// zero left-padded so that output row `t` reads rows `t-k+1..=t` only.
    pub fn causal_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2("causal_conv1d")?;
        let (k, kd) = self.value(kernel).dims2("causal_conv1d")?;
        if kd != d {
            return Err(Error::Shape {
                op: "causal_conv1d",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(kernel).to_vec(),
            });
        }
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let mut out = vec![0.0; n * d];
        for t in 0..n {
            for j in 0..k {
                let Some(s) = (t + j + 1).checked_sub(k) else {
                    continue;
                };
                for c in 0..d {
                    out[t * d + c] += kv[j * d + c] * xv[s * d + c];
                }
            }
        }
        self.push(
            Tensor::from_vec(&[n, d], out),
            Op::CausalConv { x, kernel },
            &[x, kernel],
        )
    }

    /// Rotates each coordinate pair `(2j, 2j+1)` of row `r` by `positions[r] * mu^(-2j/D)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], mu: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if !d.is_multiple_of(2) {
            return Err(Error::OddDimension(d));
        }
        if positions.len() != xv.rows() {
            return Err(Error::Shape {
                op: "rope",
                lhs: xv.shape().to_vec(),
                rhs: vec![positions.len()],
            });
        }
        let freqs = rope_frequencies(d, mu);
        let half = d / 2;
        let mut cos = vec![0.0; positions.len() * half];
        let mut sin = vec![0.0; positions.len() * half];
        let mut out = xv.clone();
        for (r, &p) in positions.iter().enumerate() {
            let row = out.row_mut(r);
            for (j, w) in freqs.iter().enumerate() {
                let (s, c) = (p as f64 * w).sin_cos();
                cos[r * half + j] = c;
                sin[r * half + j] = s;
                let (a, b) = (row[2 * j], row[2 * j + 1]);
                row[2 * j] = a * c - b * s;
                row[2 * j + 1] = a * s + b * c;
            }
        }
        self.push(out, Op::Rope { x, cos, sin }, &[x])
    }

    /// Gathers rows `idx` of `table`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, d) = tv.dims2("gather")?;
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= rows {
                return Err(Error::IndexOutOfRange {
                    what: "embedding lookup",
                    index: i,
                    bound: rows,
                });
            }
            out.extend_from_slice(tv.row(i));
        }
        self.push(
            Tensor::new(vec![idx.len().max(1), d], out)?,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        )
    }

    /// Elementwise product with a constant tensor of factors.
    pub fn const_mul(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        if factors.len() != self.value(x).numel() {
            return Err(Error::Shape {
                op: "const_mul",
                lhs: self.shape(x).to_vec(),
                rhs: vec![factors.len()],
            });
        }
        let mut out = self.value(x).clone();
        for (o, f) in out.data_mut().iter_mut().zip(&factors) {
            *o *= f;
        }
        self.push(out, Op::ConstMul { x, factors }, &[x])
    }

    /// Zeroes the rows where `keep` is false.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let d = self.value(x).last_dim();
        if keep.len() != self.value(x).rows() {
            return Err(Error::Shape {
                op: "mask_rows",
                lhs: self.shape(x).to_vec(),
                rhs: vec![keep.len()],
            });
        }
        if keep.iter().all(|&k| k) {
            return Ok(x);
        }
        let factors = keep
            .iter()
            .flat_map(|&k| std::iter::repeat_n(if k { 1.0 } else { 0.0 }, d))
            .collect();
        self.const_mul(x, factors)
    }

    /// Inverted dropout. Identity when not training or `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !training || rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let factors = (0..self.value(x).numel())
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        self.const_mul(x, factors)
    }

    /// Row `index` of a rank-2 tensor, as a `[1×D]` tensor.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let (n, d) = self.value(x).dims2("row")?;
        if index >= n {
            return Err(Error::IndexOutOfRange {
                what: "row",
                index,
                bound: n,
            });
        }
        let out = Tensor::from_vec(&[1, d], self.value(x).row(index).to_vec());
        self.push(out, Op::Row { x, index }, &[x])
    }

    /// Stacks `[1×D]` rows into `[n×D]`.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows.first().ok_or(Error::Shape {
            op: "stack",
            lhs: vec![],
            rhs: vec![],
        })?;
        let d = self.value(first).numel();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if self.value(r).numel() != d {
                return Err(Error::Shape {
                    op: "stack",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(r).to_vec(),
                });
            }
            out.extend_from_slice(self.value(r).data());
        }
        self.push(
            Tensor::from_vec(&[rows.len(), d], out),
            Op::Stack(rows.to_vec()),
            rows,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).norm_sq();
        self.push(Tensor::scalar(s), Op::SumSquares(x), &[x])
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to every
    /// node that requires grad. Leaves not reachable from `loss` get none
    /// (read as zero through [`Gradients::get_or_zeros`]).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let scale = match self.fault.as_deref() {
                Some(name) if name == node.op.name() => 1.01,
                _ => 1.0,
            };
            self.propagate(node, &g, scale, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        node: &Node,
        g: &Tensor,
        scale: f64,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        macro_rules! acc {
            ($v:expr, $t:expr) => {
                self.accumulate(grads, $v, scale, $t)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(*a, g.clone());
                acc!(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc!(*a, g.clone());
                acc!(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc!(*a, g.zip_map(self.value(*b), |x, y| x * y));
                acc!(*b, g.zip_map(self.value(*a), |x, y| x * y));
            }
            Op::Scale(a, c) => acc!(*a, g.map(|x| c * x)),
            Op::SubScaled(a, b, c) => {
                acc!(*a, g.clone());
                acc!(*b, g.map(|x| -c * x));
            }
            Op::AddBias(x, bias) => {
                acc!(*x, g.clone());
                let d = g.last_dim();
                let mut db = vec![0.0; d];
                for r in 0..g.rows() {
                    for (s, v) in db.iter_mut().zip(g.row(r)) {
                        *s += v;
                    }
                }
                let shape = self.shape(*bias).to_vec();
                acc!(*bias, Tensor::new(shape, db)?);
            }
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let da = if *ta {
                        gemm(bv, *tb, g, true)?
                    } else {
                        gemm(g, false, bv, !*tb)?
                    };
                    acc!(*a, da);
                }
                if self.requires_grad(*b) {
                    let db = if *tb {
                        gemm(g, true, av, *ta)?
                    } else {
                        gemm(av, !*ta, g, false)?
                    };
                    acc!(*b, db);
                }
            }
            Op::Gelu(x) => acc!(*x, g.zip_map(self.value(*x), |gv, xv| gv * gelu_prime_scalar(xv))),
            Op::GeluPrime(x) => {
                acc!(*x, g.zip_map(self.value(*x), |gv, xv| gv * gelu_second_scalar(xv)))
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = g.last_dim();
                let gv = self.value(*gain).data();
                let mut dx = Tensor::zeros(g.shape());
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..g.rows() {
                    let gr = g.row(r);
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        dgain[j] += gr[j] * xh[j];
                        dbias[j] += gr[j];
                        let dxh = gr[j] * gv[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    let out = dx.row_mut(r);
                    for j in 0..d {
                        out[j] = rstd[r] * (gr[j] * gv[j] - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                acc!(*x, dx);
                acc!(*gain, Tensor::new(self.shape(*gain).to_vec(), dgain)?);
                acc!(*bias, Tensor::new(self.shape(*bias).to_vec(), dbias)?);
            }
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
                weight,
            } => {
                let up = g.item() * weight;
                let shape = self.shape(*logits).to_vec();
                let n = *shape.last().unwrap();
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * n + t] -= 1.0;
                }
                for v in &mut d {
                    *v *= up;
                }
                acc!(*logits, Tensor::new(shape, d)?);
            }
            Op::CausalConv { x, kernel } => {
                let (n, d) = self.value(*x).dims2("causal_conv1d")?;
                let k = self.value(*kernel).shape()[0];
                let xv = self.value(*x).data();
                let kv = self.value(*kernel).data();
                let gd = g.data();
                let mut dx = vec![0.0; n * d];
                let mut dk = vec![0.0; k * d];
                for t in 0..n {
                    for j in 0..k {
                        let Some(s) = (t + j + 1).checked_sub(k) else {
                            continue;
                        };
                        for c in 0..d {
                            dx[s * d + c] += kv[j * d + c] * gd[t * d + c];
                            dk[j * d + c] += xv[s * d + c] * gd[t * d + c];
                        }
                    }
                }
                acc!(*x, Tensor::from_vec(&[n, d], dx));
                acc!(*kernel, Tensor::from_vec(&[k, d], dk));
            }
            Op::Rope { x, cos, sin } => {
                let half = g.last_dim() / 2;
                let mut dx = g.clone();
                for r in 0..g.rows() {
                    let row = dx.row_mut(r);
                    for j in 0..half {
                        let (c, s) = (cos[r * half + j], sin[r * half + j]);
                        let (a, b) = (row[2 * j], row[2 * j + 1]);
                        row[2 * j] = a * c + b * s;
                        row[2 * j + 1] = -a * s + b * c;
                    }
                }
                acc!(*x, dx);
            }
            Op::Gather { table, idx } => {
                self.accumulate_with(grads, *table, |buf| {
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, v) in buf.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += scale * v;
                        }
                    }
                });
            }
            Op::ConstMul { x, factors } => {
                let mut dx = g.clone();
                for (o, f) in dx.data_mut().iter_mut().zip(factors) {
                    *o *= f;
                }
                acc!(*x, dx);
            }
            Op::Row { x, index } => {
                self.accumulate_with(grads, *x, |buf| {
                    for (o, v) in buf.row_mut(*index).iter_mut().zip(g.data()) {
                        *o += scale * v;
                    }
                });
            }
            Op::Stack(rows) => {
                let d = g.last_dim();
                for (r, &v) in rows.iter().enumerate() {
                    let shape = self.shape(v).to_vec();
                    acc!(v, Tensor::new(shape, g.data()[r * d..(r + 1) * d].to_vec())?);
                }
            }
            Op::Sum(x) => {
                let shape = self.shape(*x).to_vec();
                acc!(*x, Tensor::full(&shape, g.item()));
            }
            Op::SumSquares(x) => {
                let up = 2.0 * g.item();
                acc!(*x, self.value(*x).map(|v| up * v));
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, scale: f64, t: Tensor) {
        if !self.requires_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.axpy(scale, &t),
            slot @ None => {
                let mut t = t;
                if scale != 1.0 {
                    for x in t.data_mut() {
                        *x *= scale;
                    }
                }
                *slot = Some(t);
            }
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.requires_grad(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.shape(v)));
        f(slot);
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn get_or_zeros(&self, g: &Graph, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(g.shape(v)))
    }

    pub fn take(&mut self, g: &Graph, v: Var) -> Tensor {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(g.shape(v)))
    }
}
