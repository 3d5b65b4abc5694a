//! Training schemes (MSE, adversarial, input jitter, SGD/SPGD jitter) and
//! the Adam optimizer.
//!
//! A batch is split into fixed chunks of [`CHUNK`](crate::unroll::CHUNK)
//! rows. Each chunk records its own tape; chunk gradients are summed in
//! chunk order, so results do not depend on the execution mode.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attack::pgd_attack;
use crate::datagen::Dataset;
use crate::error::{invalid, Error, Result};
use crate::par::{self, Execution};
use crate::rng::{self, purpose};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::unroll::{JitterSchedule, Solver, Variant, CHUNK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SchemeKind {
    Mse,
    Adversarial {
        epsilon: f64,
        attack_steps: usize,
        attack_step_size: f64,
    },
    InputJitter {
        /// `E‖w‖²` of the single perturbation added to `y`.
        variance: f64,
    },
    SgdJitter {
        /// Constant per-iteration `σ²_{w,k}`, unless `schedule` is given.
        #[serde(default)]
        variance: f64,
        #[serde(default)]
        schedule: Option<Vec<f64>>,
    },
    SpgdJitter {
        #[serde(default)]
        variance: f64,
        #[serde(default)]
        schedule: Option<Vec<f64>>,
    },
}

impl SchemeKind {
    pub fn name(&self) -> &'static str {
        match self {
            SchemeKind::Mse => "mse",
            SchemeKind::Adversarial { .. } => "adversarial",
            SchemeKind::InputJitter { .. } => "input_jitter",
            SchemeKind::SgdJitter { .. } => "sgd_jitter",
            SchemeKind::SpgdJitter { .. } => "spgd_jitter",
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        match self {
            SchemeKind::Mse => Ok(()),
            SchemeKind::Adversarial {
                epsilon,
                attack_steps,
                attack_step_size,
            } => {
                if !(*epsilon >= 0.0) || *attack_steps == 0 || !(*attack_step_size > 0.0) {
                    return Err(invalid("adversarial training needs ε ≥ 0, steps ≥ 1, step size > 0"));
                }
                Ok(())
            }
            SchemeKind::InputJitter { variance } => {
                if !(*variance >= 0.0) {
                    return Err(invalid("input jitter variance must be ≥ 0"));
                }
                Ok(())
            }
            SchemeKind::SgdJitter { .. } | SchemeKind::SpgdJitter { .. } => {
                self.schedule(k).map(|_| ())
            }
        }
    }

    /// Per-iteration schedule for the jitter schemes.
    pub fn schedule(&self, k: usize) -> Result<Option<JitterSchedule>> {
        match self {
            SchemeKind::SgdJitter { variance, schedule }
            | SchemeKind::SpgdJitter { variance, schedule } => {
                let s = match schedule {
                    Some(v) if v.len() != k => {
                        return Err(invalid(format!(
                            "jitter schedule has {} entries, expected K = {k}",
                            v.len()
                        )))
                    }
                    Some(v) => JitterSchedule::new(v.clone())?,
                    None => JitterSchedule::constant(k, *variance)?,
                };
                Ok(Some(s))
            }
            _ => Ok(None),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingScheme {
    pub kind: SchemeKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(invalid("adam: parameter/gradient count mismatch"));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.numel() != g.len() || m.len() != g.len() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    left: p.shape().to_vec(),
                    right: vec![g.len()],
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pi, gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Loss and parameter gradient of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    /// Mean over the batch of `‖x − x_K‖²`.
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Identifies the random streams of a batch: per-sample noise comes from
/// `(seed, purpose, epoch, sample index)`.
#[derive(Clone, Copy, Debug)]
pub struct BatchContext<'a> {
    pub seed: u64,
    pub epoch: usize,
    /// Dataset indices of the batch rows.
    pub indices: &'a [usize],
    pub exec: Execution,
}

fn slice_rows(t: &Tensor, range: std::ops::Range<usize>) -> Tensor {
    let w = t.numel() / t.rows();
    Tensor::matrix(range.len(), w, t.data()[range.start * w..range.end * w].to_vec())
        .expect("row slice")
}

/// Sums chunk losses/gradients in order and averages over the batch.
fn batch_gradient<F>(solver: &Solver, x: &Tensor, y: &Tensor, exec: Execution, noise: F) -> Result<StepOutput>
where
    F: Fn(std::ops::Range<usize>) -> Option<Vec<Tensor>> + Sync,
{
    let rows = x.rows();
    if rows == 0 || y.rows() != rows {
        return Err(Error::ShapeMismatch {
            op: "training batch",
            left: x.shape().to_vec(),
            right: y.shape().to_vec(),
        });
    }
    let chunks = par::chunks(rows, CHUNK);
    let parts = exec.map(chunks.len(), |c| -> Result<(f64, Vec<Vec<f64>>)> {
        let r = chunks[c].clone();
        let mut tape = Tape::new();
        let params = solver.net.register(&mut tape, true);
        let yv = tape.constant(slice_rows(y, r.clone()));
        let xv = tape.constant(slice_rows(x, r.clone()));
        let w = noise(r);
        let g = solver.graph(&mut tape, &params, yv, w.as_deref())?;
        let loss = tape.mse_loss(g.output, xv)?;
        let mut grads = tape.backward(loss)?;
        let value = tape.value(loss).item();
        Ok((value, params.iter().map(|p| grads.take(*p)).collect()))
    });
    let mut total = 0.0;
    let mut acc: Vec<Vec<f64>> = solver.net.params().iter().map(|p| vec![0.0; p.numel()]).collect();
    for part in parts {
        let (l, g) = part?;
        total += l;
        for (a, gi) in acc.iter_mut().zip(g) {
            a.iter_mut().zip(gi).for_each(|(s, v)| *s += v);
        }
    }
    let scale = 1.0 / rows as f64;
    acc.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= scale));
    Ok(StepOutput {
        loss: total * scale,
        grads: acc,
    })
}

/// Plain MSE step, jitter off.
pub fn mse_step(solver: &Solver, x: &Tensor, y: &Tensor, exec: Execution) -> Result<StepOutput> {
    batch_gradient(solver, x, y, exec, |_| None)
}

/// Adversarial step: attack each row, then an MSE step on `y + e*`.
pub fn at_step(
    solver: &Solver,
    x: &Tensor,
    y: &Tensor,
    epsilon: f64,
    steps: usize,
    step_size: f64,
    exec: Execution,
) -> Result<StepOutput> {
    if epsilon == 0.0 {
        return mse_step(solver, x, y, exec);
    }
    let rows = x.rows();
    let m = solver.measurement_dim();
    let chunks = par::chunks(rows, CHUNK);
    let attacked = exec.map(chunks.len(), |c| {
        let r = chunks[c].clone();
        pgd_attack(solver, &slice_rows(x, r.clone()), &slice_rows(y, r), epsilon, steps, step_size)
    });
    let mut ya = Vec::with_capacity(rows * m);
    for (c, res) in attacked.into_iter().enumerate() {
        let res = res?;
        let r = chunks[c].clone();
        let yr = &y.data()[r.start * m..r.end * m];
        ya.extend(yr.iter().zip(res.e.data()).map(|(a, b)| a + b));
    }
    mse_step(solver, x, &Tensor::matrix(rows, m, ya)?, exec)
}

/// Input jitter: one draw `w ~ N(0, σ²/m·I)` per sample, added to `y` and
/// held fixed across all unrolled iterations.
pub fn input_jitter_step(
    solver: &Solver,
    x: &Tensor,
    y: &Tensor,
    variance: f64,
    ctx: BatchContext<'_>,
) -> Result<StepOutput> {
    if variance == 0.0 {
        return mse_step(solver, x, y, ctx.exec);
    }
    let m = solver.measurement_dim();
    let std = (variance / m as f64).sqrt();
    let mut yj = y.clone();
    for (r, row) in yj.data_mut().chunks_mut(m).enumerate() {
        let mut s = rng::stream(
            ctx.seed,
            &[purpose::INPUT_JITTER, ctx.epoch as u64, ctx.indices[r] as u64],
        );
        row.iter_mut().for_each(|v| *v += std * rng::normal(&mut s));
    }
    mse_step(solver, x, &yj, ctx.exec)
}

/// SGD jitter (GD solver) or SPGD jitter (PGD solver): fresh noise at every
/// unrolled iteration, treated as constants by the backward pass.
pub fn jitter_step(
    solver: &Solver,
    x: &Tensor,
    y: &Tensor,
    schedule: &JitterSchedule,
    ctx: BatchContext<'_>,
) -> Result<StepOutput> {
    if schedule.is_off() {
        return mse_step(solver, x, y, ctx.exec);
    }
    let n = solver.signal_dim();
    batch_gradient(solver, x, y, ctx.exec, |r| {
        Some(schedule.draw_batch(r.len(), n, |i| {
            rng::stream(
                ctx.seed,
                &[purpose::JITTER, ctx.epoch as u64, ctx.indices[r.start + i] as u64],
            )
        }))
    })
}

/// Alias of [`jitter_step`] for GD solvers.
pub fn sgd_jitter_step(
    solver: &Solver,
    x: &Tensor,
    y: &Tensor,
    schedule: &JitterSchedule,
    ctx: BatchContext<'_>,
) -> Result<StepOutput> {
    if solver.cfg.variant != Variant::Gd {
        return Err(invalid("SGD jittering needs a GD solver"));
    }
    jitter_step(solver, x, y, schedule, ctx)
}

/// Alias of [`jitter_step`] for PGD solvers.
pub fn spgd_jitter_step(
    solver: &Solver,
    x: &Tensor,
    y: &Tensor,
    schedule: &JitterSchedule,
    ctx: BatchContext<'_>,
) -> Result<StepOutput> {
    if solver.cfg.variant != Variant::Pgd {
        return Err(invalid("SPGD jittering needs a PGD solver"));
    }
    jitter_step(solver, x, y, schedule, ctx)
}

/// One scheme step on a batch.
pub fn scheme_step(
    kind: &SchemeKind,
    solver: &Solver,
    x: &Tensor,
    y: &Tensor,
    ctx: BatchContext<'_>,
) -> Result<StepOutput> {
    match kind {
        SchemeKind::Mse => mse_step(solver, x, y, ctx.exec),
        SchemeKind::Adversarial {
            epsilon,
            attack_steps,
            attack_step_size,
        } => at_step(solver, x, y, *epsilon, *attack_steps, *attack_step_size, ctx.exec),
        SchemeKind::InputJitter { variance } => input_jitter_step(solver, x, y, *variance, ctx),
        SchemeKind::SgdJitter { .. } => {
            let s = kind.schedule(solver.cfg.k)?.expect("jitter schedule");
            sgd_jitter_step(solver, x, y, &s, ctx)
        }
        SchemeKind::SpgdJitter { .. } => {
            let s = kind.schedule(solver.cfg.k)?.expect("jitter schedule");
            spgd_jitter_step(solver, x, y, &s, ctx)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub items_per_second: f64,
    pub optimizer_steps: u64,
}

/// Batch order for an epoch; depends only on `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[purpose::SHUFFLE, epoch as u64]));
    idx
}

/// Trains `solver.net` in place.
pub fn train(
    scheme: &TrainingScheme,
    solver: &mut Solver,
    data: &Dataset,
    seed: u64,
    exec: Execution,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    if scheme.batch_size == 0 {
        return Err(invalid("batch size must be ≥ 1"));
    }
    scheme.kind.validate(solver.cfg.k)?;
    match (&scheme.kind, solver.cfg.variant) {
        (SchemeKind::SpgdJitter { .. }, Variant::Gd) => {
            return Err(invalid("SPGD jittering needs a PGD solver"))
        }
        (SchemeKind::SgdJitter { .. }, Variant::Pgd) => {
            return Err(invalid("SGD jittering needs a GD solver"))
        }
        _ => {}
    }
    if data.signal_dim() != solver.signal_dim() || data.measurement_dim() != solver.measurement_dim() {
        return Err(Error::ShapeMismatch {
            op: "train",
            left: vec![data.signal_dim(), data.measurement_dim()],
            right: vec![solver.signal_dim(), solver.measurement_dim()],
        });
    }
    let mut adam = Adam::new(solver.net.params(), scheme.learning_rate);
    let mut history = Vec::with_capacity(scheme.epochs);
    let start = Instant::now();
    let mut items = 0usize;
    for epoch in 0..scheme.epochs {
        let t0 = Instant::now();
        let order = epoch_order(data.len(), seed, epoch);
        let mut total = 0.0;
        for (b, idx) in order.chunks(scheme.batch_size).enumerate() {
            let (x, y) = data.gather(idx);
            let ctx = BatchContext {
                seed,
                epoch,
                indices: idx,
                exec,
            };
            let out = match scheme_step(&scheme.kind, solver, &x, &y, ctx) {
                Err(Error::Divergence { .. }) => {
                    return Err(Error::TrainingDivergence { epoch, batch: b })
                }
                other => other?,
            };
            if !out.loss.is_finite() || out.grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDivergence { epoch, batch: b });
            }
            total += out.loss * idx.len() as f64;
            adam.update(solver.net.params_mut(), &out.grads)?;
            items += idx.len();
        }
        history.push(EpochRecord {
            epoch,
            mean_loss: total / data.len() as f64,
            wall_seconds: t0.elapsed().as_secs_f64(),
        });
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        history,
        items_per_second: if secs > 0.0 { items as f64 / secs } else { 0.0 },
        optimizer_steps: adam.step,
    })
}
