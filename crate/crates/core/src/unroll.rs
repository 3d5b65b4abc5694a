//! Unrolled gradient-descent and proximal-gradient solvers.
//!
//! GD:  `x_{k+1} = x_k − η(Aᵀ(A x_k − y) + f_θ(x_k) + w_k)`
//! PGD: `x_{k+1} = prox_θ(x_k − η(Aᵀ(A x_k − y) + w_k))`
//!
//! The network weights are shared across all `K` iterations. Jitter noise
//! `w_k` is one fresh draw per executed iteration; `x₀` is never perturbed.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linops::LinearOperator;
use crate::nets::{Net, NetRole};
use crate::par::{self, Execution};
use crate::rng::{self, StreamRng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Rows per tape when a batch is split for evaluation or training.
pub const CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Gd,
    Pgd,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum X0Rule {
    /// `x₀ = Aᵀy`.
    #[default]
    Adjoint,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnrollConfig {
    pub k: usize,
    pub eta: f64,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub x0_rule: X0Rule,
}

impl UnrollConfig {
    pub fn gd(k: usize, eta: f64) -> Self {
        Self {
            k,
            eta,
            variant: Variant::Gd,
            x0_rule: X0Rule::Adjoint,
        }
    }

    pub fn pgd(k: usize, eta: f64) -> Self {
        Self {
            variant: Variant::Pgd,
            ..Self::gd(k, eta)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(invalid("unroll needs K ≥ 1"));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(invalid("unroll needs a finite step size η > 0"));
        }
        Ok(())
    }
}

/// Per-iteration jitter variances `σ²_{w,k}`. Noise at iteration `k` is
/// `N(0, σ²_{w,k}/n · I)` so that `E‖w_k‖² = σ²_{w,k}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterSchedule {
    pub variances: Vec<f64>,
}

impl JitterSchedule {
    pub fn new(variances: Vec<f64>) -> Result<Self> {
        if variances.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(invalid("jitter variances must be finite and ≥ 0"));
        }
        Ok(Self { variances })
    }

    pub fn constant(k: usize, variance: f64) -> Result<Self> {
        Self::new(vec![variance; k])
    }

    pub fn zeros(k: usize) -> Self {
        Self {
            variances: vec![0.0; k],
        }
    }

    pub fn len(&self) -> usize {
        self.variances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variances.is_empty()
    }

    /// True when every variance is zero, so no noise would ever be injected.
    pub fn is_off(&self) -> bool {
        self.variances.iter().all(|v| *v == 0.0)
    }

    /// Draws `w_1..w_K` for one sample of dimension `n`.
    pub fn draw(&self, rng: &mut StreamRng, n: usize) -> Vec<Vec<f64>> {
        self.variances
            .iter()
            .map(|var| {
                let mut w = vec![0.0; n];
                rng::fill_normal(rng, (var / n as f64).sqrt(), &mut w);
                w
            })
            .collect()
    }

    /// Draws noise for a batch, one stream per row from `stream_for(row)`,
    /// laid out as `K` tensors of shape `[rows×n]`.
    pub fn draw_batch(
        &self,
        rows: usize,
        n: usize,
        mut stream_for: impl FnMut(usize) -> StreamRng,
    ) -> Vec<Tensor> {
        // same draw order as `draw`, written straight into the batch buffers
        let stds: Vec<f64> = self.variances.iter().map(|v| (v / n as f64).sqrt()).collect();
        let mut out = vec![vec![0.0; rows * n]; self.len()];
        for r in 0..rows {
            let mut rng = stream_for(r);
            for (buf, std) in out.iter_mut().zip(&stds) {
                rng::fill_normal(&mut rng, *std, &mut buf[r * n..(r + 1) * n]);
            }
        }
        out.into_iter()
            .map(|d| Tensor::matrix(rows, n, d).expect("noise shape"))
            .collect()
    }
}

/// Tape handles produced by one unrolled forward pass.
pub struct Graph {
    /// `x₀ … x_K`.
    pub iterates: Vec<Var>,
    /// Network output at each of the `K` iterations.
    pub net_outputs: Vec<Var>,
    pub output: Var,
}

/// Recorded iterates of one unrolled pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub iterates: Vec<Tensor>,
    /// Injected noises `w_1 … w_K`; empty with jitter off.
    pub noises: Vec<Tensor>,
    /// `f_θ(x_k)` (GD) or `prox_θ(u_k)` (PGD) for `k = 0 … K−1`.
    pub net_outputs: Vec<Tensor>,
    /// `½‖y − A x_k‖²` for every iterate.
    pub data_fidelity: Vec<f64>,
    /// `r_θ(x_k)` when the net has an explicit potential.
    pub potential: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn last(&self) -> &Tensor {
        self.iterates.last().expect("trajectory is never empty")
    }
}

/// A network embedded in `K` unrolled iterations of a forward model.
#[derive(Clone, Debug)]
pub struct Solver {
    pub op: Arc<LinearOperator>,
    pub net: Net,
    pub cfg: UnrollConfig,
}

impl Solver {
    pub fn new(op: Arc<LinearOperator>, net: Net, cfg: UnrollConfig) -> Result<Self> {
        cfg.validate()?;
        let expected = match cfg.variant {
            Variant::Gd => NetRole::Gradient,
            Variant::Pgd => NetRole::Proximal,
        };
        if net.role() != expected {
            return Err(invalid(format!(
                "{:?} unrolling needs a {:?} net, got {:?}",
                cfg.variant,
                expected,
                net.role()
            )));
        }
        if let Some(d) = net.input_dim() {
            if d != op.domain_dim() {
                return Err(Error::ShapeMismatch {
                    op: "solver",
                    left: vec![d],
                    right: vec![op.domain_dim()],
                });
            }
        }
        Ok(Self { op, net, cfg })
    }

    pub fn signal_dim(&self) -> usize {
        self.op.domain_dim()
    }

    pub fn measurement_dim(&self) -> usize {
        self.op.range_dim()
    }

    /// Records the unrolled pass for measurements `y` (`[m]` or `[B×m]`).
    ///
    /// `noise`, when given, holds `K` tensors shaped like the iterates; it
    /// enters the graph as constants.
    pub fn graph(
        &self,
        tape: &mut Tape,
        params: &[Var],
        y: Var,
        noise: Option<&[Tensor]>,
    ) -> Result<Graph> {
        let eta = self.cfg.eta;
        let k_max = self.cfg.k;
        if let Some(noise) = noise {
            if noise.len() != k_max {
                return Err(invalid(format!(
                    "jitter schedule has {} entries, expected K = {k_max}",
                    noise.len()
                )));
            }
        }
        let aty = self.op.adjoint_var(tape, y)?;
        let x0 = match self.cfg.x0_rule {
            X0Rule::Adjoint => aty,
            X0Rule::Zero => tape.constant(Tensor::zeros(tape.value(aty).shape())),
        };
        let identity = self.op.is_identity();
        let mut iterates = Vec::with_capacity(k_max + 1);
        let mut net_outputs = Vec::with_capacity(k_max);
        iterates.push(x0);
        let mut x = x0;
        for k in 0..k_max {
            let w = noise.map(|n| tape.constant(n[k].clone()));
            let mut terms: Vec<(Var, f64)> = Vec::with_capacity(5);
            if identity {
                terms.push((x, 1.0 - eta));
            } else {
                let ata = self.op.normal_var(tape, x)?;
                terms.push((x, 1.0));
                terms.push((ata, -eta));
            }
            terms.push((aty, eta));
            if let Some(w) = w {
                terms.push((w, -eta));
            }
            let next = match self.cfg.variant {
                Variant::Gd => {
                    let f = self.net.forward(tape, params, x)?;
                    net_outputs.push(f);
                    terms.push((f, -eta));
                    tape.lin_comb(&terms)?
                }
                Variant::Pgd => {
                    let u = tape.lin_comb(&terms)?;
                    let p = self.net.forward(tape, params, u)?;
                    net_outputs.push(p);
                    p
                }
            };
            if !tape.value(next).all_finite() {
                return Err(Error::Divergence { iteration: k + 1 });
            }
            iterates.push(next);
            x = next;
        }
        Ok(Graph {
            iterates,
            net_outputs,
            output: x,
        })
    }

    /// Runs the solver and records the full trajectory.
    pub fn unroll(&self, y: &Tensor, noise: Option<&[Tensor]>) -> Result<Trajectory> {
        let mut tape = Tape::new();
        let params = self.net.register(&mut tape, false);
        let yv = tape.constant(y.clone());
        let g = self.graph(&mut tape, &params, yv, noise)?;
        let iterates: Vec<Tensor> = g.iterates.iter().map(|v| tape.value(*v).clone()).collect();
        let data_fidelity = iterates
            .iter()
            .map(|x| self.data_fidelity(x, y))
            .collect::<Result<Vec<_>>>()?;
        let potential = iterates
            .iter()
            .map(|x| {
                let w = self.signal_dim();
                (0..x.numel() / w)
                    .map(|r| self.net.potential(&x.data()[r * w..(r + 1) * w]))
                    .sum::<Option<f64>>()
            })
            .collect::<Option<Vec<f64>>>();
        Ok(Trajectory {
            iterates,
            noises: noise.map(<[Tensor]>::to_vec).unwrap_or_default(),
            net_outputs: g.net_outputs.iter().map(|v| tape.value(*v).clone()).collect(),
            data_fidelity,
            potential,
        })
    }

    /// Unrolls with jitter drawn from `schedule` (or off when `None`).
    pub fn unroll_jittered(
        &self,
        y: &Tensor,
        jitter: Option<(&JitterSchedule, &mut StreamRng)>,
    ) -> Result<Trajectory> {
        match jitter {
            Some((schedule, rng)) if !schedule.is_off() => {
                let n = self.signal_dim();
                let rows = y.numel() / self.measurement_dim();
                let mut draws: Vec<Vec<f64>> = vec![Vec::new(); schedule.len()];
                for _ in 0..rows {
                    for (k, w) in schedule.draw(rng, n).into_iter().enumerate() {
                        draws[k].extend(w);
                    }
                }
                let shape = if y.shape().len() == 2 { vec![rows, n] } else { vec![n] };
                let noise = draws
                    .into_iter()
                    .map(|d| Tensor::new(shape.clone(), d))
                    .collect::<Result<Vec<_>>>()?;
                self.unroll(y, Some(&noise))
            }
            _ => self.unroll(y, None),
        }
    }

    /// `x_K` with jitter off.
    pub fn reconstruct(&self, y: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.net.register(&mut tape, false);
        let yv = tape.constant(y.clone());
        let g = self.graph(&mut tape, &params, yv, None)?;
        Ok(tape.value(g.output).clone())
    }

    /// Reconstructs every row of `ys: [N×m]`, chunked over `exec`.
    pub fn reconstruct_batch(&self, ys: &Tensor, exec: Execution) -> Result<Tensor> {
        let m = self.measurement_dim();
        let n = self.signal_dim();
        let rows = ys.numel() / m;
        let chunks = par::chunks(rows, CHUNK);
        let parts = exec.map(chunks.len(), |c| {
            let r = chunks[c].clone();
            let y = Tensor::matrix(r.len(), m, ys.data()[r.start * m..r.end * m].to_vec())?;
            self.reconstruct(&y)
        });
        let mut out = Vec::with_capacity(rows * n);
        for p in parts {
            out.extend_from_slice(p?.data());
        }
        Tensor::matrix(rows, n, out)
    }

    /// `½‖y − A x‖²` summed over rows.
    pub fn data_fidelity(&self, x: &Tensor, y: &Tensor) -> Result<f64> {
        let (n, m) = (self.signal_dim(), self.measurement_dim());
        let mut total = 0.0;
        let mut ax = vec![0.0; m];
        for r in 0..x.numel() / n {
            use crate::tape::RowOperator;
            self.op.apply_row(&x.data()[r * n..(r + 1) * n], &mut ax);
            total += 0.5 * crate::tensor::sq_dist(&ax, &y.data()[r * m..(r + 1) * m]);
        }
        Ok(total)
    }
}

/// GD unrolling; the solver must be configured for the GD variant.
pub fn gd_unroll(solver: &Solver, y: &Tensor, noise: Option<&[Tensor]>) -> Result<Trajectory> {
    if solver.cfg.variant != Variant::Gd {
        return Err(invalid("gd_unroll needs a GD solver"));
    }
    solver.unroll(y, noise)
}

/// Proximal-gradient unrolling; noise enters the proximal net's input.
pub fn pgd_unroll(solver: &Solver, y: &Tensor, noise: Option<&[Tensor]>) -> Result<Trajectory> {
    if solver.cfg.variant != Variant::Pgd {
        return Err(invalid("pgd_unroll needs a PGD solver with a proximal net"));
    }
    solver.unroll(y, noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Activation, Architecture, NetSpec};

    fn zero_gd(dim: usize, k: usize, eta: f64) -> Solver {
        let net = Net::linear(Tensor::zeros(&[dim, dim]), Tensor::zeros(&[dim]), NetRole::Gradient)
            .unwrap();
        Solver::new(Arc::new(LinearOperator::identity(dim)), net, UnrollConfig::gd(k, eta)).unwrap()
    }

    #[test]
    fn zero_net_unit_step_is_fixed_point() {
        let s = zero_gd(2, 5, 1.0);
        let y = Tensor::vector(vec![0.3, -0.2]);
        let t = s.unroll(&y, None).unwrap();
        assert_eq!(t.iterates.len(), 6);
        for x in &t.iterates {
            assert_eq!(x, &y);
        }
    }

    #[test]
    fn reconstruct_of_zero_net_is_identity() {
        for eta in [0.1, 0.5, 1.0] {
            let s = zero_gd(3, 10, eta);
            let y = Tensor::vector(vec![0.3, -0.2, 1.5]);
            let x = s.reconstruct(&y).unwrap();
            for (a, b) in x.data().iter().zip(y.data()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_schedule_matches_jitter_off() {
        let net = Net::build(
            &NetSpec::new(Architecture::Mlp {
                widths: vec![2, 8, 2],
                activation: Activation::Tanh,
            }),
            1,
        )
        .unwrap();
        let s = Solver::new(Arc::new(LinearOperator::identity(2)), net, UnrollConfig::gd(4, 0.3))
            .unwrap();
        let y = Tensor::vector(vec![0.1, 0.2]);
        let mut rng = rng::stream(0, &[1]);
        let a = s
            .unroll_jittered(&y, Some((&JitterSchedule::zeros(4), &mut rng)))
            .unwrap();
        let b = s.unroll(&y, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_draw_count_and_variance() {
        let sched = JitterSchedule::constant(10, 0.04).unwrap();
        let mut rng = rng::stream(3, &[2]);
        let n = 4;
        let mut total = 0.0;
        let trials = 10_000;
        for _ in 0..trials {
            let w = sched.draw(&mut rng, n);
            assert_eq!(w.len(), 10);
            total += w[3].iter().map(|v| v * v).sum::<f64>();
        }
        let mean = total / trials as f64;
        assert!((mean - 0.04).abs() / 0.04 < 0.05, "{mean}");
    }

    #[test]
    fn batch_draws_match_per_row_draws() {
        let sched = JitterSchedule::new(vec![0.1, 0.0, 0.3]).unwrap();
        let batch = sched.draw_batch(5, 3, |r| rng::stream(1, &[r as u64]));
        for r in 0..5 {
            let row = sched.draw(&mut rng::stream(1, &[r as u64]), 3);
            for (k, w) in row.iter().enumerate() {
                assert_eq!(batch[k].row(r), w.as_slice());
            }
        }
    }

    #[test]
    fn pgd_identity_prox_is_plain_gd() {
        let net = Net::linear(Tensor::zeros(&[2, 2]), Tensor::zeros(&[2]), NetRole::Proximal).unwrap();
        let s = Solver::new(Arc::new(LinearOperator::identity(2)), net, UnrollConfig::pgd(2, 0.5))
            .unwrap();
        let y = Tensor::vector(vec![1.0, 0.0]);
        let t = pgd_unroll(&s, &y, None).unwrap();
        assert_eq!(t.last().data(), &[1.0, 0.0]);
        assert!(gd_unroll(&s, &y, None).is_err());
    }

    #[test]
    fn variant_role_mismatch_rejected() {
        let net = Net::linear(Tensor::zeros(&[2, 2]), Tensor::zeros(&[2]), NetRole::Gradient).unwrap();
        assert!(Solver::new(Arc::new(LinearOperator::identity(2)), net, UnrollConfig::pgd(2, 0.5)).is_err());
    }

    #[test]
    fn divergence_names_iteration() {
        let w = Tensor::matrix(1, 1, vec![-1e200]).unwrap();
        let net = Net::linear(w, Tensor::zeros(&[1]), NetRole::Gradient).unwrap();
        let s = Solver::new(Arc::new(LinearOperator::identity(1)), net, UnrollConfig::gd(10, 1.0))
            .unwrap();
        match s.reconstruct(&Tensor::vector(vec![1.0])) {
            Err(Error::Divergence { iteration }) => assert_eq!(iteration, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
