//! Linear forward models `y = A x + z`.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng;
use crate::tape::{RowOperator, Tape, Var};
use crate::tensor::{dot, norm, Tensor};

/// Power-iteration budget used when an operator is constructed.
pub const POWER_ITERS: usize = 200;
pub const POWER_TOL: f64 = 1e-10;
const POWER_SEED: u64 = 0x5eed;

/// Serializable description of a forward operator, as it appears in
/// experiment configs and dataset headers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorSpec {
    Identity {
        dim: usize,
    },
    Dense {
        rows: usize,
        cols: usize,
        values: Vec<f64>,
    },
    /// Per-trace convolution with a Ricker wavelet.
    Ricker {
        peak_frequency: f64,
        dt: f64,
        half_width: usize,
        traces: usize,
        trace_len: usize,
    },
    /// Per-trace convolution with an explicit, odd-length, centred wavelet.
    Convolution {
        wavelet: Vec<f64>,
        traces: usize,
        trace_len: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum OperatorKind {
    Identity(usize),
    Dense {
        rows: usize,
        cols: usize,
        values: Vec<f64>,
    },
    /// Block-Toeplitz: the same wavelet convolved along time on every trace.
    Toeplitz {
        wavelet: Vec<f64>,
        traces: usize,
        trace_len: usize,
    },
}

/// An immutable linear operator with its cached spectral bound
/// `μ = λ_max(AᵀA)`.
#[derive(Clone, Debug)]
pub struct LinearOperator {
    kind: OperatorKind,
    spec: OperatorSpec,
    mu: f64,
}

/// Samples `(1 − 2π²f²t²)·exp(−π²f²t²)` at `t = −half_width·dt ..= half_width·dt`.
pub fn ricker_wavelet(peak_frequency: f64, dt: f64, half_width: usize) -> Result<Vec<f64>> {
    if !(peak_frequency > 0.0) || !(dt > 0.0) {
        return Err(invalid("ricker wavelet needs positive peak frequency and dt"));
    }
    let a = (PI * peak_frequency).powi(2);
    Ok((0..=2 * half_width)
        .map(|i| {
            let t = (i as f64 - half_width as f64) * dt;
            let at2 = a * t * t;
            (1.0 - 2.0 * at2) * (-at2).exp()
        })
        .collect())
}

impl LinearOperator {
    pub fn identity(dim: usize) -> Self {
        Self::from_spec(&OperatorSpec::Identity { dim }).expect("identity operator")
    }

    pub fn dense(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::from_spec(&OperatorSpec::Dense { rows, cols, values })
    }

    pub fn convolution(wavelet: Vec<f64>, traces: usize, trace_len: usize) -> Result<Self> {
        Self::from_spec(&OperatorSpec::Convolution {
            wavelet,
            traces,
            trace_len,
        })
    }

    pub fn from_spec(spec: &OperatorSpec) -> Result<Self> {
        let kind = match spec {
            OperatorSpec::Identity { dim } => {
                if *dim == 0 {
                    return Err(invalid("identity operator needs dim ≥ 1"));
                }
                OperatorKind::Identity(*dim)
            }
            OperatorSpec::Dense { rows, cols, values } => {
                if rows * cols != values.len() || *rows == 0 || *cols == 0 {
                    return Err(Error::InvalidShape {
                        shape: vec![*rows, *cols],
                        reason: format!("dense operator has {} values", values.len()),
                    });
                }
                OperatorKind::Dense {
                    rows: *rows,
                    cols: *cols,
                    values: values.clone(),
                }
            }
            OperatorSpec::Ricker {
                peak_frequency,
                dt,
                half_width,
                traces,
                trace_len,
            } => toeplitz(
                ricker_wavelet(*peak_frequency, *dt, *half_width)?,
                *traces,
                *trace_len,
            )?,
            OperatorSpec::Convolution {
                wavelet,
                traces,
                trace_len,
            } => toeplitz(wavelet.clone(), *traces, *trace_len)?,
        };
        let mut op = Self {
            kind,
            spec: spec.clone(),
            mu: 0.0,
        };
        op.mu = op.spectral_bound(POWER_ITERS, POWER_TOL, POWER_SEED);
        Ok(op)
    }

    pub fn kind(&self) -> &OperatorKind {
        &self.kind
    }

    pub fn spec(&self) -> &OperatorSpec {
        &self.spec
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.kind, OperatorKind::Identity(_))
    }

    /// Cached largest eigenvalue of `AᵀA`.
    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn domain_dim(&self) -> usize {
        match &self.kind {
            OperatorKind::Identity(n) => *n,
            OperatorKind::Dense { cols, .. } => *cols,
            OperatorKind::Toeplitz {
                traces, trace_len, ..
            } => traces * trace_len,
        }
    }

    pub fn range_dim(&self) -> usize {
        match &self.kind {
            OperatorKind::Identity(n) => *n,
            OperatorKind::Dense { rows, .. } => *rows,
            OperatorKind::Toeplitz {
                traces, trace_len, ..
            } => traces * trace_len,
        }
    }

    fn check(&self, len: usize, expected: usize) -> Result<()> {
        if len != expected {
            return Err(Error::ShapeMismatch {
                op: "operator",
                left: vec![len],
                right: vec![expected],
            });
        }
        Ok(())
    }

    /// `A x` for a single signal (any shape with the right element count).
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x.numel(), self.domain_dim())?;
        let mut out = vec![0.0; self.range_dim()];
        self.apply_row(x.data(), &mut out);
        Ok(Tensor::vector(out))
    }

    /// `Aᵀ u` for a single measurement.
    pub fn adjoint_apply(&self, u: &Tensor) -> Result<Tensor> {
        self.check(u.numel(), self.range_dim())?;
        let mut out = vec![0.0; self.domain_dim()];
        self.adjoint_row(u.data(), &mut out);
        Ok(Tensor::vector(out))
    }

    /// `AᵀA x` on raw slices.
    pub fn normal_apply(&self, x: &[f64], out: &mut [f64]) {
        let mut tmp = vec![0.0; self.range_dim()];
        self.apply_row(x, &mut tmp);
        self.adjoint_row(&tmp, out);
    }

    /// Records `A x` on the tape (row-wise for a batch).
    pub fn apply_var(self: &Arc<Self>, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.is_identity() {
            self.check(*tape.value(x).shape().last().unwrap_or(&0), self.domain_dim())?;
            return Ok(x);
        }
        tape.row_op(x, self.clone(), false)
    }

    /// Records `Aᵀ u` on the tape.
    pub fn adjoint_var(self: &Arc<Self>, tape: &mut Tape, u: Var) -> Result<Var> {
        if self.is_identity() {
            self.check(*tape.value(u).shape().last().unwrap_or(&0), self.range_dim())?;
            return Ok(u);
        }
        tape.row_op(u, self.clone(), true)
    }

    /// Records `AᵀA x` on the tape.
    pub fn normal_var(self: &Arc<Self>, tape: &mut Tape, x: Var) -> Result<Var> {
        let ax = self.apply_var(tape, x)?;
        self.adjoint_var(tape, ax)
    }

    /// Power iteration on `AᵀA`: at most `iters` steps, stopping early once
    /// the Rayleigh quotient changes by less than `tol` (relative).
    pub fn spectral_bound(&self, iters: usize, tol: f64, seed: u64) -> f64 {
        if self.is_identity() {
            return 1.0;
        }
        let n = self.domain_dim();
        let mut rng = rng::stream(seed, &[rng::purpose::POWER]);
        let mut v = vec![0.0; n];
        rng::fill_normal(&mut rng, 1.0, &mut v);
        let nv = norm(&v);
        v.iter_mut().for_each(|x| *x /= nv);
        let mut w = vec![0.0; n];
        let mut lambda = 0.0;
        for _ in 0..iters.max(1) {
            self.normal_apply(&v, &mut w);
            let next = dot(&v, &w);
            let nw = norm(&w);
            if nw == 0.0 {
                return 0.0;
            }
            let done = (next - lambda).abs() <= tol * next.abs();
            lambda = next;
            v.iter_mut().zip(&w).for_each(|(a, b)| *a = b / nw);
            if done {
                break;
            }
        }
        lambda
    }

    /// Dense `[m×n]` matrix of the operator, built column by column.
    pub fn to_dense(&self) -> Tensor {
        let (m, n) = (self.range_dim(), self.domain_dim());
        let mut out = vec![0.0; m * n];
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; m];
        for j in 0..n {
            e[j] = 1.0;
            self.apply_row(&e, &mut col);
            for i in 0..m {
                out[i * n + j] = col[i];
            }
            e[j] = 0.0;
        }
        Tensor::matrix(m, n, out).expect("dense operator shape")
    }
}

fn toeplitz(wavelet: Vec<f64>, traces: usize, trace_len: usize) -> Result<OperatorKind> {
    if wavelet.len().is_multiple_of(2) {
        return Err(invalid("wavelet length must be odd (centred)"));
    }
    if wavelet.iter().all(|w| *w == 0.0) || wavelet.iter().any(|w| !w.is_finite()) {
        return Err(invalid("degenerate wavelet"));
    }
    if traces == 0 || trace_len == 0 {
        return Err(invalid("convolution operator needs traces ≥ 1 and trace_len ≥ 1"));
    }
    Ok(OperatorKind::Toeplitz {
        wavelet,
        traces,
        trace_len,
    })
}

/// `out[t] = Σ_j w[j]·x[t − (j − c)]`, zero outside the trace.
fn convolve_trace(w: &[f64], x: &[f64], out: &mut [f64]) {
    let c = (w.len() / 2) as isize;
    let len = x.len() as isize;
    out.fill(0.0);
    for (j, &wj) in w.iter().enumerate() {
        let shift = j as isize - c;
        // out[t] += wj * x[t - shift]
        let t0 = shift.max(0);
        let t1 = (len + shift).min(len);
        if t0 >= t1 {
            continue;
        }
        let src = &x[(t0 - shift) as usize..(t1 - shift) as usize];
        out[t0 as usize..t1 as usize]
            .iter_mut()
            .zip(src)
            .for_each(|(o, v)| *o += wj * v);
    }
}

/// Adjoint of [`convolve_trace`]: correlation with the wavelet.
fn correlate_trace(w: &[f64], u: &[f64], out: &mut [f64]) {
    let c = (w.len() / 2) as isize;
    let len = u.len() as isize;
    out.fill(0.0);
    for (j, &wj) in w.iter().enumerate() {
        let shift = j as isize - c;
        // out[s] += wj * u[s + shift]
        let s0 = (-shift).max(0);
        let s1 = (len - shift).min(len);
        if s0 >= s1 {
            continue;
        }
        let src = &u[(s0 + shift) as usize..(s1 + shift) as usize];
        out[s0 as usize..s1 as usize]
            .iter_mut()
            .zip(src)
            .for_each(|(o, v)| *o += wj * v);
    }
}

impl RowOperator for LinearOperator {
    fn input_dim(&self) -> usize {
        self.domain_dim()
    }

    fn output_dim(&self) -> usize {
        self.range_dim()
    }

    fn apply_row(&self, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            OperatorKind::Identity(_) => out.copy_from_slice(x),
            OperatorKind::Dense { rows, cols, values } => {
                for i in 0..*rows {
                    out[i] = dot(&values[i * cols..(i + 1) * cols], x);
                }
            }
            OperatorKind::Toeplitz {
                wavelet, trace_len, ..
            } => {
                for (xs, os) in x.chunks(*trace_len).zip(out.chunks_mut(*trace_len)) {
                    convolve_trace(wavelet, xs, os);
                }
            }
        }
    }

    fn adjoint_row(&self, u: &[f64], out: &mut [f64]) {
        match &self.kind {
            OperatorKind::Identity(_) => out.copy_from_slice(u),
            OperatorKind::Dense { rows, cols, values } => {
                out.fill(0.0);
                for i in 0..*rows {
                    let s = u[i];
                    out.iter_mut()
                        .zip(&values[i * cols..(i + 1) * cols])
                        .for_each(|(o, a)| *o += s * a);
                }
            }
            OperatorKind::Toeplitz {
                wavelet, trace_len, ..
            } => {
                for (us, os) in u.chunks(*trace_len).zip(out.chunks_mut(*trace_len)) {
                    correlate_trace(wavelet, us, os);
                }
            }
        }
    }
}
