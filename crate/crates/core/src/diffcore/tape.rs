//! Wengert-list reverse-mode autodiff.
//!
//! Every primitive appends one node holding its output value and the handles
//! of its inputs. `backward` walks the list from the loss node down to index 0,
//! which is exactly the reverse of recording order, and applies each node's
//! local vector-Jacobian product.

use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise and row-wise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Softmax over the last axis of a 2-D tensor.
    SoftmaxRows,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Act(Var, Activation),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Square(Var),
    Log(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Linear { .. } => "linear",
            Op::Act(_, Activation::Relu) => "relu",
            Op::Act(_, Activation::Sigmoid) => "sigmoid",
            Op::Act(_, Activation::SoftmaxRows) => "softmax",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::Square(_) => "square",
            Op::Log(_) => "log",
            Op::Clamp { .. } => "clamp",
            Op::Sum(_) => "sum",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of the operations applied during one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
    order: Vec<usize>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` did not
    /// participate in the loss.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.sizes[v.0]],
        }
    }

    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Adds the gradient for `v` into the parameter's gradient buffer.
    pub fn accumulate_into(&self, v: Var, param: &mut Tensor) -> Result<()> {
        match &self.grads[v.0] {
            Some(g) => param.accumulate_grad(g),
            None => param.accumulate_grad(&vec![0.0; self.sizes[v.0]]),
        }
    }

    /// Node indices in the order their local rules were applied.
    pub fn visit_order(&self) -> &[usize] {
        &self.order
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c = alpha * a·b + beta * c` on strided row-major operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the operand slices cover m×k, k×n and m×n elements under the
    // given strides, checked above in debug builds and by callers' shape
    // validation in release builds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
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

    /// Operation names in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Copies the value of `v` out as a plain tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes hold valid shapes")
    }

    /// The single value of a scalar node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = self.node(v);
        if n.value.len() != 1 {
            return Err(Error::contract(format!("expected scalar, got shape {:?}", n.shape)));
        }
        Ok(n.value[0])
    }

    /// Records a leaf. It takes part in differentiation iff the tensor
    /// `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    /// Copies `v` into a fresh constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, false, Op::Leaf)
    }

    /// `x[batch×in] · w[in×out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::dim("linear", xs, ws));
        }
        let (batch, inp, out) = (xs[0], xs[1], ws[1]);
        let b_len: usize = bs.iter().product();
        if b_len != out {
            return Err(Error::dim("linear bias", ws, bs));
        }
        let mut y = Vec::with_capacity(batch * out);
        for _ in 0..batch {
            y.extend_from_slice(self.value(b));
        }
        gemm(
            batch,
            inp,
            out,
            self.value(x),
            (inp as isize, 1),
            self.value(w),
            (out as isize, 1),
            &mut y,
            1.0,
        );
        let rg = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        Ok(self.push(vec![batch, out], y, rg, Op::Linear { x, w, b }))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let v = self.value(x);
        let out = match kind {
            Activation::Relu => v.iter().map(|&a| a.max(0.0)).collect(),
            Activation::Sigmoid => v.iter().map(|&a| sigmoid(a)).collect(),
            Activation::SoftmaxRows => {
                if shape.len() != 2 {
                    return Err(Error::dim("softmax (needs 2-D)", &shape, &[0, 0]));
                }
                let cols = shape[1];
                let mut out = Vec::with_capacity(v.len());
                for row in v.chunks(cols) {
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let start = out.len();
                    let mut z = 0.0;
                    for &a in row {
                        let e = (a - mx).exp();
                        z += e;
                        out.push(e);
                    }
                    out[start..].iter_mut().for_each(|e| *e /= z);
                }
                out
            }
        };
        let rg = self.requires_grad(x);
        Ok(self.push(shape, out, rg, Op::Act(x, kind)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::SoftmaxRows)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(name, self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let op = match name {
            "add" => Op::Add(a, b),
            "sub" => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y)
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).iter().map(|&a| scale * a + shift).collect();
        let rg = self.requires_grad(x);
        self.push(self.shape(x).to_vec(), out, rg, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&a| a * a).collect();
        let rg = self.requires_grad(x);
        self.push(self.shape(x).to_vec(), out, rg, Op::Square(x))
    }

    /// Natural logarithm. Callers clamp probabilities first.
    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&a| a.ln()).collect();
        let rg = self.requires_grad(x);
        self.push(self.shape(x).to_vec(), out, rg, Op::Log(x))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the input lies outside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).iter().map(|&a| a.clamp(lo, hi)).collect();
        let rg = self.requires_grad(x);
        self.push(self.shape(x).to_vec(), out, rg, Op::Clamp { x, lo, hi })
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.requires_grad(x);
        self.push(vec![1], vec![s], rg, Op::Sum(x))
    }

    /// Mean of all elements.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Horizontal concatenation of 2-D values with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of zero inputs"))?;
        let tensors: Vec<Tensor> = parts.iter().map(|&p| self.tensor(p)).collect();
        for (p, t) in parts.iter().zip(&tensors) {
            if t.shape().len() != 2 {
                return Err(Error::dim("concat_cols (needs 2-D)", self.shape(*p), &[0, 0]));
            }
        }
        let refs: Vec<&Tensor> = tensors.iter().collect();
        let joined = Tensor::concat_cols(&refs)
            .map_err(|_| Error::dim("concat_cols", self.shape(first), self.shape(*parts.last().unwrap())))?;
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        let shape = joined.shape().to_vec();
        Ok(self.push(shape, joined.into_data(), rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `[start, end)` of a 2-D value.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let sliced = self.tensor(x).slice_cols(start, end)?;
        let rg = self.requires_grad(x);
        let shape = sliced.shape().to_vec();
        Ok(self.push(shape, sliced.into_data(), rg, Op::SliceCols { x, start }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                ln.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut order = Vec::new();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            order.push(i);
            self.apply_rule(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads,
            sizes: self.nodes.iter().map(|n| n.value.len()).collect(),
            order,
        })
    }

    fn apply_rule(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (batch, inp) = (self.shape(*x)[0], self.shape(*x)[1]);
                let out = self.shape(*w)[1];
                if wants(*x) {
                    let mut dx = vec![0.0; batch * inp];
                    // dX = dY · Wᵀ
                    gemm(
                        batch,
                        out,
                        inp,
                        g,
                        (out as isize, 1),
                        self.value(*w),
                        (1, out as isize),
                        &mut dx,
                        0.0,
                    );
                    add_into(&mut grads[x.0], &dx);
                }
                if wants(*w) {
                    let mut dw = vec![0.0; inp * out];
                    // dW = Xᵀ · dY
                    gemm(
                        inp,
                        batch,
                        out,
                        self.value(*x),
                        (1, inp as isize),
                        g,
                        (out as isize, 1),
                        &mut dw,
                        0.0,
                    );
                    add_into(&mut grads[w.0], &dw);
                }
                if wants(*b) {
                    let mut db = vec![0.0; out];
                    for row in g.chunks(out) {
                        db.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Act(x, kind) => {
                if !wants(*x) {
                    return;
                }
                let y = &node.value;
                let dx: Vec<f64> = match kind {
                    Activation::Relu => self
                        .value(*x)
                        .iter()
                        .zip(g)
                        .map(|(&a, &gi)| if a > 0.0 { gi } else { 0.0 })
                        .collect(),
                    Activation::Sigmoid => y.iter().zip(g).map(|(&s, &gi)| gi * s * (1.0 - s)).collect(),
                    Activation::SoftmaxRows => {
                        let cols = node.shape[1];
                        let mut dx = Vec::with_capacity(y.len());
                        for (yr, gr) in y.chunks(cols).zip(g.chunks(cols)) {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            dx.extend(yr.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - dot)));
                        }
                        dx
                    }
                };
                add_into(&mut grads[x.0], &dx);
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if wants(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if wants(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    add_into(&mut grads[b.0], &neg);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let d: Vec<f64> = g.iter().zip(self.value(*b)).map(|(gi, bi)| gi * bi).collect();
                    add_into(&mut grads[a.0], &d);
                }
                if wants(*b) {
                    let d: Vec<f64> = g.iter().zip(self.value(*a)).map(|(gi, ai)| gi * ai).collect();
                    add_into(&mut grads[b.0], &d);
                }
            }
            Op::Affine { x, scale } => {
                if wants(*x) {
                    let d: Vec<f64> = g.iter().map(|gi| gi * scale).collect();
                    add_into(&mut grads[x.0], &d);
                }
            }
            Op::Square(x) => {
                if wants(*x) {
                    let d: Vec<f64> = g.iter().zip(self.value(*x)).map(|(gi, a)| 2.0 * a * gi).collect();
                    add_into(&mut grads[x.0], &d);
                }
            }
            Op::Log(x) => {
                if wants(*x) {
                    let d: Vec<f64> = g.iter().zip(self.value(*x)).map(|(gi, a)| gi / a).collect();
                    add_into(&mut grads[x.0], &d);
                }
            }
            Op::Clamp { x, lo, hi } => {
                if wants(*x) {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(self.value(*x))
                        .map(|(&gi, &a)| if a >= *lo && a <= *hi { gi } else { 0.0 })
                        .collect();
                    add_into(&mut grads[x.0], &d);
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let d = vec![g[0]; self.value(*x).len()];
                    add_into(&mut grads[x.0], &d);
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.shape[0];
                let width = node.shape[1];
                let mut offset = 0;
                for p in parts {
                    let pc = self.shape(*p)[1];
                    if wants(*p) {
                        let mut d = Vec::with_capacity(rows * pc);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * width + offset..r * width + offset + pc]);
                        }
                        add_into(&mut grads[p.0], &d);
                    }
                    offset += pc;
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let (rows, width) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let pc = node.shape[1];
                    let mut d = vec![0.0; rows * width];
                    for r in 0..rows {
                        d[r * width + start..r * width + start + pc].copy_from_slice(&g[r * pc..(r + 1) * pc]);
                    }
                    add_into(&mut grads[x.0], &d);
                }
            }
        }
    }
}
