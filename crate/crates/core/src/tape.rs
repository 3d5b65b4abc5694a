//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive applied during one forward pass. Nodes
//! are appended in evaluation order, so the tape is topologically sorted by
//! construction and [`Tape::backward`] is a single reverse sweep that visits
//! each node once. Gradients accumulate additively across fan-out.
//!
//! Broadcasting is limited to a single-element operand in `add`, `sub` and
//! `mul`; anything else must be reshaped explicitly.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A linear map applied independently to every row of a batch.
///
/// Implemented by the forward operators so that `A x` and `Aᵀ u` can be
/// recorded on the tape with their exact adjoints as backward rules.
pub trait RowOperator: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn apply_row(&self, x: &[f64], out: &mut [f64]);
    fn adjoint_row(&self, u: &[f64], out: &mut [f64]);
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy)]
struct ConvDims {
    batch: usize,
    c_in: usize,
    c_out: usize,
    len: usize,
    k: usize,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    LinComb(Vec<(usize, f64)>),
    Matvec(usize, usize),
    Matmul(usize, usize, [usize; 3]),
    Linear(usize, usize, usize),
    Conv1d {
        x: usize,
        w: usize,
        b: Option<usize>,
        dims: ConvDims,
    },
    Relu(usize),
    Tanh(usize),
    SqDist(usize, usize),
    Sum(usize),
    Reshape(usize),
    Rows {
        x: usize,
        op: Arc<dyn RowOperator>,
        adjoint: bool,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros if nothing flowed into `v`.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Vec<f64> {
        let n: usize = self.shapes[v.0].iter().product();
        self.grads[v.0].take().unwrap_or_else(|| vec![0.0; n])
    }
}

fn scalar_like(t: &Tensor) -> bool {
    t.numel() == 1
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: &[f64]) {
    match slot {
        Some(g) => g.iter_mut().zip(contribution).for_each(|(a, b)| *a += b),
        None => *slot = Some(contribution.to_vec()),
    }
}

fn accumulate_scaled(slot: &mut Option<Vec<f64>>, contribution: &[f64], c: f64) {
    match slot {
        Some(g) => g.iter_mut().zip(contribution).for_each(|(a, b)| *a += c * b),
        None => *slot = Some(contribution.iter().map(|b| c * b).collect()),
    }
}

fn slot(slots: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut Vec<f64> {
    slots[i].get_or_insert_with(|| vec![0.0; len])
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

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf (weights, attacked inputs).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() || scalar_like(tb) {
            Ok(ta.shape().to_vec())
        } else if scalar_like(ta) {
            Ok(tb.shape().to_vec())
        } else {
            Err(Error::ShapeMismatch {
                op,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            })
        }
    }

    fn zip_values(&self, a: Var, b: Var, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let data = if da.len() == db.len() {
            da.iter().zip(db).map(|(x, y)| f(*x, *y)).collect()
        } else if db.len() == 1 {
            da.iter().map(|x| f(*x, db[0])).collect()
        } else {
            db.iter().map(|y| f(da[0], *y)).collect()
        };
        debug_assert_eq!(n, Vec::<f64>::len(&data));
        Tensor::new(shape, data).expect("binary op shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape("add", a, b)?;
        let value = self.zip_values(a, b, shape, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape("sub", a, b)?;
        let value = self.zip_values(a, b, shape, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape("mul", a, b)?;
        let value = self.zip_values(a, b, shape, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let value = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| c * x).collect())
            .expect("scale shape");
        let rg = self.rg(a);
        self.push(value, Op::Scale(a.0, c), rg)
    }

    /// `Σ cᵢ·vᵢ` over same-shaped operands, recorded as a single node.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::InvalidArgument("lin_comb needs at least one term".into()))?;
        let shape = self.value(first).shape().to_vec();
        let mut out = vec![0.0; self.value(first).numel()];
        for &(v, c) in terms {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "lin_comb",
                    left: shape,
                    right: t.shape().to_vec(),
                });
            }
            out.iter_mut().zip(t.data()).for_each(|(o, x)| *o += c * x);
        }
        let rg = terms.iter().any(|(v, _)| self.rg(*v));
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::LinComb(terms.iter().map(|(v, c)| (v.0, *c)).collect()),
            rg,
        ))
    }

    /// `M·v` for `M: [m×n]`, `v: [n]`.
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (tm, tv) = (self.value(m), self.value(v));
        if tm.shape().len() != 2 || tv.shape().len() != 1 || tm.shape()[1] != tv.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                left: tm.shape().to_vec(),
                right: tv.shape().to_vec(),
            });
        }
        let (rows, cols) = (tm.shape()[0], tm.shape()[1]);
        let (dm, dv) = (tm.data(), tv.data());
        let out: Vec<f64> = (0..rows)
            .map(|i| crate::tensor::dot(&dm[i * cols..(i + 1) * cols], dv))
            .collect();
        let rg = self.rg(m) || self.rg(v);
        Ok(self.push(Tensor::vector(out), Op::Matvec(m.0, v.0), rg))
    }

    /// `A·B` for `A: [m×k]`, `B: [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let (da, db) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = da[i * k + p];
                orow.iter_mut()
                    .zip(&db[p * n..(p + 1) * n])
                    .for_each(|(o, x)| *o += s * x);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::Matmul(a.0, b.0, [m, k, n]), rg))
    }

    /// Affine layer `x·Wᵀ + b` for `x: [B×in]`, `W: [out×in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let ok = tx.shape().len() == 2
            && tw.shape().len() == 2
            && tx.shape()[1] == tw.shape()[1]
            && tb.shape() == [tw.shape()[0]];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: tx.shape().to_vec(),
                right: tw.shape().to_vec(),
            });
        }
        let (batch, fan_in, fan_out) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
        let (dx, dw, db) = (tx.data(), tw.data(), tb.data());
        let mut out = Vec::with_capacity(batch * fan_out);
        for _ in 0..batch {
            out.extend_from_slice(db);
        }
        if fan_in < fan_out {
            gemm_nn(batch, fan_in, fan_out, dx, &transpose(dw, fan_out, fan_in), &mut out);
        } else {
            gemm_nt(batch, fan_in, fan_out, dx, dw, &mut out);
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Tensor::matrix(batch, fan_out, out)?;
        Ok(self.push(value, Op::Linear(x.0, w.0, b.0), rg))
    }

    /// Zero-padded ("same") 1-D cross-correlation.
    ///
    /// `signal` is `[c_in×T]` or `[B×c_in×T]`, `kernels` is `[c_out×c_in×k]`
    /// with odd `k`, `bias` (optional) is `[c_out]`. Output length equals `T`.
    pub fn conv1d(&mut self, signal: Var, kernels: Var, bias: Option<Var>) -> Result<Var> {
        let (ts, tk) = (self.value(signal), self.value(kernels));
        let batched = ts.shape().len() == 3;
        let (batch, c_in, len) = match ts.shape() {
            [c, t] => (1, *c, *t),
            [b, c, t] => (*b, *c, *t),
            s => {
                return Err(Error::InvalidShape {
                    shape: s.to_vec(),
                    reason: "conv1d signal must be [c_in×T] or [B×c_in×T]".into(),
                })
            }
        };
        let (c_out, k) = match tk.shape() {
            [co, ci, k] if *ci == c_in => (*co, *k),
            s => {
                return Err(Error::ShapeMismatch {
                    op: "conv1d",
                    left: ts.shape().to_vec(),
                    right: s.to_vec(),
                })
            }
        };
        if k % 2 == 0 {
            return Err(Error::InvalidShape {
                shape: tk.shape().to_vec(),
                reason: "conv1d kernel length must be odd".into(),
            });
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [c_out] {
                return Err(Error::ShapeMismatch {
                    op: "conv1d bias",
                    left: vec![c_out],
                    right: self.value(b).shape().to_vec(),
                });
            }
        }
        let dims = ConvDims {
            batch,
            c_in,
            c_out,
            len,
            k,
        };
        let bias_data = bias.map(|b| self.value(b).data());
        let out = conv1d_forward(ts.data(), tk.data(), bias_data, dims);
        let shape = if batched {
            vec![batch, c_out, len]
        } else {
            vec![c_out, len]
        };
        let rg = self.rg(signal) || self.rg(kernels) || bias.is_some_and(|b| self.rg(b));
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Conv1d {
                x: signal.0,
                w: kernels.0,
                b: bias.map(|b| b.0),
                dims,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let value = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|x| if *x > 0.0 { *x } else { 0.0 }).collect(),
        )
        .expect("relu shape");
        let rg = self.rg(a);
        self.push(value, Op::Relu(a.0), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let value = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x.tanh()).collect())
            .expect("tanh shape");
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a.0), rg)
    }

    /// Squared ℓ2 distance `Σ (a − b)²` (not averaged).
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse_loss",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let s = crate::tensor::sq_dist(ta.data(), tb.data());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::SqDist(a.0, b.0), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a.0), rg))
    }

    /// Applies `op` (or its adjoint) to every row of `x`.
    ///
    /// `x` may be a single vector or a `[B×n]` batch.
    pub fn row_op(&mut self, x: Var, op: Arc<dyn RowOperator>, adjoint: bool) -> Result<Var> {
        let tx = self.value(x);
        let (din, dout) = if adjoint {
            (op.output_dim(), op.input_dim())
        } else {
            (op.input_dim(), op.output_dim())
        };
        let (rows, width, batched) = match tx.shape() {
            [n] => (1, *n, false),
            [b, n] => (*b, *n, true),
            s => {
                return Err(Error::InvalidShape {
                    shape: s.to_vec(),
                    reason: "operator input must be a vector or a batch of rows".into(),
                })
            }
        };
        if width != din {
            return Err(Error::ShapeMismatch {
                op: "operator apply",
                left: tx.shape().to_vec(),
                right: vec![din],
            });
        }
        let mut out = vec![0.0; rows * dout];
        for r in 0..rows {
            let xr = &tx.data()[r * din..(r + 1) * din];
            let or = &mut out[r * dout..(r + 1) * dout];
            if adjoint {
                op.adjoint_row(xr, or);
            } else {
                op.apply_row(xr, or);
            }
        }
        let shape = if batched { vec![rows, dout] } else { vec![dout] };
        let rg = self.rg(x);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Rows { x: x.0, op, adjoint }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_deref() else { continue };
            self.backward_node(node, g, lo);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn numel(&self, i: usize) -> usize {
        self.nodes[i].value.numel()
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Adjoint of a possibly broadcast operand: reduce if it was scalar-expanded.
    fn push_broadcast(&self, lo: &mut [Option<Vec<f64>>], j: usize, g: &[f64], c: f64) {
        if !self.wants(j) {
            return;
        }
        if self.numel(j) == g.len() {
            if c == 1.0 {
                accumulate(&mut lo[j], g);
            } else {
                accumulate_scaled(&mut lo[j], g, c);
            }
        } else {
            let s: f64 = g.iter().sum();
            accumulate(&mut lo[j], &[c * s]);
        }
    }

    fn backward_node(&self, node: &Node, g: &[f64], lo: &mut [Option<Vec<f64>>]) {
        let val = |j: usize| self.nodes[j].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.push_broadcast(lo, *a, g, 1.0);
                self.push_broadcast(lo, *b, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.push_broadcast(lo, *a, g, 1.0);
                self.push_broadcast(lo, *b, g, -1.0);
            }
            Op::Mul(a, b) => {
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if !self.wants(this) {
                        continue;
                    }
                    let ov = val(other);
                    let contrib: Vec<f64> = if ov.len() == g.len() {
                        g.iter().zip(ov).map(|(gi, o)| gi * o).collect()
                    } else {
                        g.iter().map(|gi| gi * ov[0]).collect()
                    };
                    self.push_broadcast(lo, this, &contrib, 1.0);
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    accumulate_scaled(&mut lo[*a], g, *c);
                }
            }
            Op::LinComb(terms) => {
                for &(v, c) in terms {
                    if self.wants(v) {
                        accumulate_scaled(&mut lo[v], g, c);
                    }
                }
            }
            Op::Matvec(m, v) => {
                let (rows, cols) = {
                    let s = self.nodes[*m].value.shape();
                    (s[0], s[1])
                };
                if self.wants(*m) {
                    let vv = val(*v);
                    let gm = slot(lo, *m, rows * cols);
                    for i in 0..rows {
                        gm[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(vv)
                            .for_each(|(o, x)| *o += g[i] * x);
                    }
                }
                if self.wants(*v) {
                    let mv = val(*m);
                    let gv = slot(lo, *v, cols);
                    for i in 0..rows {
                        gv.iter_mut()
                            .zip(&mv[i * cols..(i + 1) * cols])
                            .for_each(|(o, x)| *o += g[i] * x);
                    }
                }
            }
            Op::Matmul(a, b, [m, k, n]) => {
                let (m, k, n) = (*m, *k, *n);
                if self.wants(*a) {
                    let bv = val(*b);
                    let ga = slot(lo, *a, m * k);
                    for i in 0..m {
                        for p in 0..k {
                            ga[i * k + p] += crate::tensor::dot(
                                &g[i * n..(i + 1) * n],
                                &bv[p * n..(p + 1) * n],
                            );
                        }
                    }
                }
                if self.wants(*b) {
                    let av = val(*a);
                    let gb = slot(lo, *b, k * n);
                    for i in 0..m {
                        for p in 0..k {
                            let s = av[i * k + p];
                            gb[p * n..(p + 1) * n]
                                .iter_mut()
                                .zip(&g[i * n..(i + 1) * n])
                                .for_each(|(o, x)| *o += s * x);
                        }
                    }
                }
            }
            Op::Linear(x, w, b) => {
                let (batch, fan_in) = {
                    let s = self.nodes[*x].value.shape();
                    (s[0], s[1])
                };
                let fan_out = self.nodes[*w].value.shape()[0];
                if self.wants(*x) {
                    let wv = val(*w);
                    let gx = slot(lo, *x, batch * fan_in);
                    if fan_in >= fan_out {
                        gemm_nn(batch, fan_out, fan_in, g, wv, gx);
                    } else {
                        gemm_nt(batch, fan_out, fan_in, g, &transpose(wv, fan_out, fan_in), gx);
                    }
                }
                if self.wants(*w) {
                    let xv = val(*x);
                    let gw = slot(lo, *w, fan_out * fan_in);
                    if fan_in >= fan_out {
                        gemm_tn(batch, fan_out, fan_in, g, xv, gw);
                    } else {
                        let mut gwt = vec![0.0; fan_in * fan_out];
                        gemm_tn(batch, fan_in, fan_out, xv, g, &mut gwt);
                        for i in 0..fan_in {
                            for o in 0..fan_out {
                                gw[o * fan_in + i] += gwt[i * fan_out + o];
                            }
                        }
                    }
                }
                if self.wants(*b) {
                    let gb = slot(lo, *b, fan_out);
                    for r in 0..batch {
                        gb.iter_mut()
                            .zip(&g[r * fan_out..(r + 1) * fan_out])
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Conv1d { x, w, b, dims } => {
                let d = *dims;
                if self.wants(*x) {
                    let gx = slot(lo, *x, d.batch * d.c_in * d.len);
                    conv1d_backward_input(g, val(*w), gx, d);
                }
                if self.wants(*w) {
                    let gw = slot(lo, *w, d.c_out * d.c_in * d.k);
                    conv1d_backward_kernels(g, val(*x), gw, d);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let gb = slot(lo, *b, d.c_out);
                        for bi in 0..d.batch {
                            for co in 0..d.c_out {
                                let off = (bi * d.c_out + co) * d.len;
                                gb[co] += g[off..off + d.len].iter().sum::<f64>();
                            }
                        }
                    }
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let av = val(*a);
                    let ga = slot(lo, *a, av.len());
                    ga.iter_mut()
                        .zip(g.iter().zip(av))
                        .for_each(|(d, (gi, x))| {
                            if *x > 0.0 {
                                *d += gi
                            }
                        });
                }
            }
            Op::Tanh(a) => {
                if self.wants(*a) {
                    let yv = node.value.data();
                    let ga = slot(lo, *a, yv.len());
                    ga.iter_mut()
                        .zip(g.iter().zip(yv))
                        .for_each(|(d, (gi, y))| *d += gi * (1.0 - y * y));
                }
            }
            Op::SqDist(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let s = 2.0 * g[0];
                if self.wants(*a) {
                    let ga = slot(lo, *a, av.len());
                    ga.iter_mut()
                        .zip(av.iter().zip(bv))
                        .for_each(|(d, (x, y))| *d += s * (x - y));
                }
                if self.wants(*b) {
                    let gb = slot(lo, *b, bv.len());
                    gb.iter_mut()
                        .zip(av.iter().zip(bv))
                        .for_each(|(d, (x, y))| *d -= s * (x - y));
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let n = self.numel(*a);
                    let ga = slot(lo, *a, n);
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    accumulate(&mut lo[*a], g);
                }
            }
            Op::Rows { x, op, adjoint } => {
                if self.wants(*x) {
                    let (din, dout) = if *adjoint {
                        (op.output_dim(), op.input_dim())
                    } else {
                        (op.input_dim(), op.output_dim())
                    };
                    let rows = g.len() / dout;
                    let gx = slot(lo, *x, rows * din);
                    let mut buf = vec![0.0; din];
                    for r in 0..rows {
                        let gr = &g[r * dout..(r + 1) * dout];
                        if *adjoint {
                            op.apply_row(gr, &mut buf);
                        } else {
                            op.adjoint_row(gr, &mut buf);
                        }
                        gx[r * din..(r + 1) * din]
                            .iter_mut()
                            .zip(&buf)
                            .for_each(|(d, v)| *d += v);
                    }
                }
            }
        }
    }
}

/// Valid output range `[t0, t1)` for tap offset `shift` on length `len`.
#[inline]
/// `[rows×cols]` → `[cols×rows]`.
fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// `C[m×n] += A[m×k]·B[k×n]`, row-major, inner loop over `n`.
fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            ci.iter_mut()
                .zip(&b[p * n..(p + 1) * n])
                .for_each(|(o, x)| *o += s * x);
        }
    }
}

/// `C[m×n] += A[m×k]·B[n×k]ᵀ`, inner dot products over `k`.
fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += crate::tensor::dot(ai, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `C[m×n] += A[r×m]ᵀ·B[r×n]`, inner loop over `n`.
fn gemm_tn(r: usize, m: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for row in 0..r {
        let br = &b[row * n..(row + 1) * n];
        for i in 0..m {
            let s = a[row * m + i];
            c[i * n..(i + 1) * n]
                .iter_mut()
                .zip(br)
                .for_each(|(o, x)| *o += s * x);
        }
    }
}

fn tap_range(shift: isize, len: usize) -> (usize, usize) {
    let t0 = (-shift).max(0) as usize;
    let t1 = (len as isize - shift.max(0)).max(0) as usize;
    (t0.min(len), t1)
}

fn conv1d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, d: ConvDims) -> Vec<f64> {
    let half = (d.k / 2) as isize;
    let mut out = vec![0.0; d.batch * d.c_out * d.len];
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let o = &mut out[(b * d.c_out + co) * d.len..(b * d.c_out + co + 1) * d.len];
            if let Some(bias) = bias {
                o.fill(bias[co]);
            }
            for ci in 0..d.c_in {
                let xr = &x[(b * d.c_in + ci) * d.len..(b * d.c_in + ci + 1) * d.len];
                let wr = &w[(co * d.c_in + ci) * d.k..(co * d.c_in + ci + 1) * d.k];
                for (j, &wv) in wr.iter().enumerate() {
                    let shift = j as isize - half;
                    let (t0, t1) = tap_range(shift, d.len);
                    if t0 >= t1 {
                        continue;
                    }
                    let src = &xr[(t0 as isize + shift) as usize..(t1 as isize + shift) as usize];
                    o[t0..t1].iter_mut().zip(src).for_each(|(o, x)| *o += wv * x);
                }
            }
        }
    }
    out
}

fn conv1d_backward_input(g: &[f64], w: &[f64], gx: &mut [f64], d: ConvDims) {
    let half = (d.k / 2) as isize;
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let gr = &g[(b * d.c_out + co) * d.len..(b * d.c_out + co + 1) * d.len];
            for ci in 0..d.c_in {
                let gxr = &mut gx[(b * d.c_in + ci) * d.len..(b * d.c_in + ci + 1) * d.len];
                let wr = &w[(co * d.c_in + ci) * d.k..(co * d.c_in + ci + 1) * d.k];
                for (j, &wv) in wr.iter().enumerate() {
                    let shift = j as isize - half;
                    let (t0, t1) = tap_range(shift, d.len);
                    if t0 >= t1 {
                        continue;
                    }
                    let dst = &mut gxr[(t0 as isize + shift) as usize..(t1 as isize + shift) as usize];
                    dst.iter_mut().zip(&gr[t0..t1]).for_each(|(o, gv)| *o += wv * gv);
                }
            }
        }
    }
}

fn conv1d_backward_kernels(g: &[f64], x: &[f64], gw: &mut [f64], d: ConvDims) {
    let half = (d.k / 2) as isize;
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let gr = &g[(b * d.c_out + co) * d.len..(b * d.c_out + co + 1) * d.len];
            for ci in 0..d.c_in {
                let xr = &x[(b * d.c_in + ci) * d.len..(b * d.c_in + ci + 1) * d.len];
                let gwr = &mut gw[(co * d.c_in + ci) * d.k..(co * d.c_in + ci + 1) * d.k];
                for (j, gwv) in gwr.iter_mut().enumerate() {
                    let shift = j as isize - half;
                    let (t0, t1) = tap_range(shift, d.len);
                    if t0 >= t1 {
                        continue;
                    }
                    let src = &xr[(t0 as isize + shift) as usize..(t1 as isize + shift) as usize];
                    *gwv += crate::tensor::dot(&gr[t0..t1], src);
                }
            }
        }
    }
}
