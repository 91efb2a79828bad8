//! Reverse-mode automatic differentiation on a define-by-run tape.
//!
//! The tape is rebuilt for every forward pass. Primitive set: matmul (plus a
//! transposed-left variant), add, elementwise multiply, ReLU, row-wise
//! softmax, clamped log, sum, mean, scalar scale, inner product, Frobenius
//! norm, and elementwise power. Everything else (broadcasts, row means, row
//! selection, subtraction) is composed from these.
//!
//! A tape and its values are confined to one thread; distinct tapes on
//! distinct threads are independent.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// log arguments are clamped to at least this before evaluation, so losses on
/// near-one-hot probability vectors stay finite.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a node on a tape. Only valid for the tape that produced it.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Val(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// out = a · b, a: [m,k], b: [k,n]
    Matmul { a: Val, b: Val },
    /// out = aᵀ · b, a: [p,m], b: [p,n]
    MatmulTn { a: Val, b: Val },
    Add { a: Val, b: Val },
    Mul { a: Val, b: Val },
    Relu { x: Val },
    /// Row-wise softmax over the last dimension (1-D input is one row).
    Softmax { x: Val },
    /// ln(max(x, LOG_CLAMP))
    Log { x: Val },
    Sum { x: Val },
    Mean { x: Val },
    Scale { x: Val, c: f64 },
    /// Σ aᵢ·bᵢ over all entries (scalar output).
    Dot { a: Val, b: Val },
    /// sqrt(Σ xᵢ²) with subgradient 0 at the origin.
    FrobNorm { x: Val },
    /// Elementwise xᵉ.
    Powf { x: Val, e: f64 },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

/// Recorded forward pass. One `backward` traversal populates the gradient of
/// every `requires_grad` leaf reachable from the loss node.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    ran_backward: bool,
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => panic!("expected rank <= 2, got {:?}", shape),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Val {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            op,
        });
        Val(self.nodes.len() - 1)
    }

    /// Register a tensor as a leaf; its `requires_grad` flag carries over.
    pub fn leaf(&mut self, t: &Tensor) -> Val {
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Val {
        self.push(data, shape.into(), false, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Val {
        self.constant(vec![1], vec![v])
    }

    pub fn value(&self, v: Val) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Val) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Val) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    fn requires(&self, v: Val) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── primitives ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Val, b: Val) -> Result<Val> {
        let (m, k) = dims2(self.shape(a));
        let (k2, n) = dims2(self.shape(b));
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = matmul_data(self.value(a), self.value(b), m, k, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, vec![m, n], rg, Op::Matmul { a, b }))
    }

    /// out = aᵀ·b with a: [p,m], b: [p,n]. The transposed variant exists so the
    /// head-orthogonality penalty needs no separate transpose primitive.
    pub fn matmul_tn(&mut self, a: Val, b: Val) -> Result<Val> {
        let (p, m) = dims2(self.shape(a));
        let (p2, n) = dims2(self.shape(b));
        if p != p2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_tn",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..p {
                let x = av[l * m + i];
                if x != 0.0 {
                    let brow = &bv[l * n..(l + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += x * brow[j];
                    }
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, vec![m, n], rg, Op::MatmulTn { a, b }))
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, shape, rg, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, shape, rg, Op::Mul { a, b }))
    }

    pub fn relu(&mut self, x: Val) -> Val {
        let out: Vec<f64> = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(out, shape, rg, Op::Relu { x })
    }

    /// Row-wise softmax with max-shift; output entries are strictly positive
    /// and every row sums to one.
    pub fn softmax(&mut self, x: Val) -> Val {
        let (r, c) = dims2(self.shape(x));
        let xv = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_row(&xv[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(out, shape, rg, Op::Softmax { x })
    }

    /// ln(max(x, LOG_CLAMP)); in the clamped region the gradient is zero,
    /// matching the derivative of the computed function.
    pub fn log(&mut self, x: Val) -> Val {
        let out: Vec<f64> = self.value(x).iter().map(|v| v.max(LOG_CLAMP).ln()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(out, shape, rg, Op::Log { x })
    }

    pub fn sum(&mut self, x: Val) -> Val {
        let s: f64 = self.value(x).iter().sum();
        let rg = self.requires(x);
        self.push(vec![s], vec![1], rg, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Val) -> Result<Val> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::EmptyBatch("mean"));
        }
        let s: f64 = self.value(x).iter().sum::<f64>() / n as f64;
        let rg = self.requires(x);
        Ok(self.push(vec![s], vec![1], rg, Op::Mean { x }))
    }

    pub fn scale(&mut self, x: Val, c: f64) -> Val {
        let out: Vec<f64> = self.value(x).iter().map(|v| c * v).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(out, shape, rg, Op::Scale { x, c })
    }

    /// Inner product over all entries of two same-shape values.
    pub fn dot(&mut self, a: Val, b: Val) -> Result<Val> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "dot",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .sum();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(vec![s], vec![1], rg, Op::Dot { a, b }))
    }

    pub fn frobenius_norm(&mut self, x: Val) -> Val {
        let s: f64 = self.value(x).iter().map(|v| v * v).sum::<f64>().sqrt();
        let rg = self.requires(x);
        self.push(vec![s], vec![1], rg, Op::FrobNorm { x })
    }

    /// Elementwise power. Requires x ≥ 0, and x > 0 when e < 1, so the result
    /// and its derivative stay finite.
    pub fn powf(&mut self, x: Val, e: f64) -> Result<Val> {
        for &v in self.value(x) {
            if v < 0.0 || (v == 0.0 && e < 1.0) {
                return Err(Error::invalid_input(format!(
                    "powf: base {} outside domain for exponent {}",
                    v, e
                )));
            }
        }
        let out: Vec<f64> = self.value(x).iter().map(|v| v.powf(e)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        Ok(self.push(out, shape, rg, Op::Powf { x, e }))
    }

    // ── compositions ────────────────────────────────────────────────────

    /// a − b as add(a, scale(b, −1)).
    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Repeat a [1,c] row `rows` times via a ones-column matmul.
    pub fn broadcast_rows(&mut self, row: Val, rows: usize) -> Result<Val> {
        let (r, _c) = dims2(self.shape(row));
        if r != 1 {
            return Err(Error::invalid_input(format!(
                "broadcast_rows expects a single row, got {:?}",
                self.shape(row)
            )));
        }
        let ones = self.constant(vec![rows, 1], vec![1.0; rows]);
        self.matmul(ones, row)
    }

    /// Column means of a [r,c] value as a [1,c] value (ones-row matmul).
    pub fn mean_rows(&mut self, x: Val) -> Result<Val> {
        let (r, _c) = dims2(self.shape(x));
        if r == 0 {
            return Err(Error::EmptyBatch("mean_rows"));
        }
        let w = self.constant(vec![1, r], vec![1.0 / r as f64; r]);
        self.matmul(w, x)
    }

    /// Gather rows of a [r,c] value via a constant selection matmul; gradient
    /// scatters back to the source rows.
    pub fn select_rows(&mut self, x: Val, idx: &[usize]) -> Result<Val> {
        let (r, _c) = dims2(self.shape(x));
        let mut sel = vec![0.0; idx.len() * r];
        for (i, &j) in idx.iter().enumerate() {
            if j >= r {
                return Err(Error::invalid_input(format!(
                    "select_rows: row {} out of {}",
                    j, r
                )));
            }
            sel[i * r + j] = 1.0;
        }
        let s = self.constant(vec![idx.len(), r], sel);
        self.matmul(s, x)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse traversal from a scalar loss. Gradient accumulators are zeroed
    /// at the start, then filled additively so shared subexpressions sum.
    pub fn backward(&mut self, loss: Val) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::invalid_input(
                "backward: loss node is not on this tape",
            ));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::invalid_input(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.grads = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.data.len()])
            .collect();
        self.grads[loss.0][0] = 1.0;
        self.ran_backward = true;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if self.grads[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            self.backward_node(i);
        }
        Ok(())
    }

    /// Gradient of the loss w.r.t. a node; `None` before `backward` or for
    /// nodes that do not require gradients.
    pub fn grad(&self, v: Val) -> Option<&[f64]> {
        if self.ran_backward && self.nodes[v.0].requires_grad {
            Some(&self.grads[v.0])
        } else {
            None
        }
    }

    /// Copy this node's gradient into the tensor's accumulator.
    pub fn write_grad(&self, v: Val, t: &mut Tensor) -> Result<()> {
        let g = self
            .grad(v)
            .ok_or_else(|| Error::invalid_input("write_grad: no gradient for node"))?;
        t.set_grad(g.to_vec())
    }

    fn backward_node(&mut self, i: usize) {
        let g = std::mem::take(&mut self.grads[i]);
        match self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = dims2(&self.nodes[a.0].shape);
                let n = self.nodes[i].shape[1];
                if self.requires(a) {
                    // ∂L/∂a = g · bᵀ
                    let bv = &self.nodes[b.0].data;
                    let ga = &mut self.grads[a.0];
                    for r in 0..m {
                        for c in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[r * n + j] * bv[c * n + j];
                            }
                            ga[r * k + c] += acc;
                        }
                    }
                }
                if self.requires(b) {
                    // ∂L/∂b = aᵀ · g
                    let av = &self.nodes[a.0].data;
                    let gb = &mut self.grads[b.0];
                    for c in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for r in 0..m {
                                acc += av[r * k + c] * g[r * n + j];
                            }
                            gb[c * n + j] += acc;
                        }
                    }
                }
            }
            Op::MatmulTn { a, b } => {
                // out = aᵀ·b, a: [p,m], b: [p,n], g: [m,n]
                let (p, m) = dims2(&self.nodes[a.0].shape);
                let n = self.nodes[i].shape[1];
                if self.requires(a) {
                    // ∂L/∂a = b · gᵀ
                    let bv = &self.nodes[b.0].data;
                    let ga = &mut self.grads[a.0];
                    for l in 0..p {
                        for c in 0..m {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += bv[l * n + j] * g[c * n + j];
                            }
                            ga[l * m + c] += acc;
                        }
                    }
                }
                if self.requires(b) {
                    // ∂L/∂b = a · g
                    let av = &self.nodes[a.0].data;
                    let gb = &mut self.grads[b.0];
                    for l in 0..p {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for c in 0..m {
                                acc += av[l * m + c] * g[c * n + j];
                            }
                            gb[l * n + j] += acc;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if self.requires(a) {
                    accumulate(&mut self.grads[a.0], &g, 1.0);
                }
                if self.requires(b) {
                    accumulate(&mut self.grads[b.0], &g, 1.0);
                }
            }
            Op::Mul { a, b } => {
                if self.requires(a) {
                    let bv = self.nodes[b.0].data.clone();
                    for (ga, (gi, bi)) in self.grads[a.0].iter_mut().zip(g.iter().zip(&bv)) {
                        *ga += gi * bi;
                    }
                }
                if self.requires(b) {
                    let av = self.nodes[a.0].data.clone();
                    for (gb, (gi, ai)) in self.grads[b.0].iter_mut().zip(g.iter().zip(&av)) {
                        *gb += gi * ai;
                    }
                }
            }
            Op::Relu { x } => {
                if self.requires(x) {
                    let xv = self.nodes[x.0].data.clone();
                    for (gx, (gi, xi)) in self.grads[x.0].iter_mut().zip(g.iter().zip(&xv)) {
                        if *xi > 0.0 {
                            *gx += gi;
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                if self.requires(x) {
                    let (r, c) = dims2(&self.nodes[i].shape);
                    let p = self.nodes[i].data.clone();
                    let gx = &mut self.grads[x.0];
                    for row in 0..r {
                        let base = row * c;
                        let dot: f64 = (0..c).map(|j| g[base + j] * p[base + j]).sum();
                        for j in 0..c {
                            gx[base + j] += p[base + j] * (g[base + j] - dot);
                        }
                    }
                }
            }
            Op::Log { x } => {
                if self.requires(x) {
                    let xv = self.nodes[x.0].data.clone();
                    for (gx, (gi, xi)) in self.grads[x.0].iter_mut().zip(g.iter().zip(&xv)) {
                        if *xi >= LOG_CLAMP {
                            *gx += gi / xi;
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if self.requires(x) {
                    accumulate(&mut self.grads[x.0], &vec![g[0]; self.nodes[x.0].data.len()], 1.0);
                }
            }
            Op::Mean { x } => {
                if self.requires(x) {
                    let n = self.nodes[x.0].data.len() as f64;
                    let v = g[0] / n;
                    for gx in self.grads[x.0].iter_mut() {
                        *gx += v;
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.requires(x) {
                    accumulate(&mut self.grads[x.0], &g, c);
                }
            }
            Op::Dot { a, b } => {
                let s = g[0];
                if self.requires(a) {
                    let bv = self.nodes[b.0].data.clone();
                    accumulate(&mut self.grads[a.0], &bv, s);
                }
                if self.requires(b) {
                    let av = self.nodes[a.0].data.clone();
                    accumulate(&mut self.grads[b.0], &av, s);
                }
            }
            Op::FrobNorm { x } => {
                if self.requires(x) {
                    let norm = self.nodes[i].data[0];
                    if norm > 0.0 {
                        let xv = self.nodes[x.0].data.clone();
                        accumulate(&mut self.grads[x.0], &xv, g[0] / norm);
                    }
                    // subgradient 0 at the origin
                }
            }
            Op::Powf { x, e } => {
                if self.requires(x) {
                    let xv = self.nodes[x.0].data.clone();
                    for (gx, (gi, xi)) in self.grads[x.0].iter_mut().zip(g.iter().zip(&xv)) {
                        *gx += gi * e * xi.powf(e - 1.0);
                    }
                }
            }
        }
        self.grads[i] = g;
    }
}

fn accumulate(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

pub(crate) fn matmul_data(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let x = a[i * k + l];
            if x != 0.0 {
                let brow = &b[l * n..(l + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += x * brow[j];
                }
            }
        }
    }
    out
}

pub(crate) fn softmax_row(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(logits) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Central-difference gradient of a scalar map, step `h` per coordinate.
pub fn central_diff_gradient<F: Fn(&[f64]) -> f64>(f: F, params: &[f64], step: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        let orig = p[i];
        p[i] = orig + step;
        let fp = f(&p);
        p[i] = orig - step;
        let fm = f(&p);
        p[i] = orig;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Max over coordinates of |analytic − central difference| / max(1, |cd|).
/// `f` must be deterministic and `step` positive.
pub fn finite_diff_check<F: Fn(&[f64]) -> f64>(
    f: F,
    analytic: &[f64],
    params: &[f64],
    step: f64,
) -> f64 {
    debug_assert!(step > 0.0);
    debug_assert_eq!(analytic.len(), params.len());
    let fd = central_diff_gradient(f, params, step);
    analytic
        .iter()
        .zip(&fd)
        .map(|(a, d)| (a - d).abs() / d.abs().max(1.0))
        .fold(0.0, f64::max)
}
