//! Reconstruction metrics and robustness / generalization risks.
//!
//! Risks are means over samples of squared ℓ2 errors `‖x − x̂‖²`. Per-sample
//! MSE values in reports are per-coordinate means, from which PSNR follows.

use serde::{Deserialize, Serialize};

use crate::attack::pgd_attack;
use crate::datagen::Dataset;
use crate::error::{invalid, Error, Result};
use crate::par::{self, Execution};
use crate::rng::{self, purpose};
use crate::tape::RowOperator;
use crate::tensor::{sq_dist, Tensor};
use crate::unroll::{Solver, CHUNK};

/// `10·log10(peak² / mse)`; `+∞` when the MSE is zero.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

pub fn psnr(xhat: &[f64], x: &[f64], peak: f64) -> Result<f64> {
    if xhat.len() != x.len() || x.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            left: vec![xhat.len()],
            right: vec![x.len()],
        });
    }
    if !(peak > 0.0) {
        return Err(invalid("psnr peak must be > 0"));
    }
    Ok(psnr_from_mse(sq_dist(xhat, x) / x.len() as f64, peak))
}

pub const SSIM_WINDOW: usize = 8;

/// Mean SSIM over all `8×8` windows (stride 1) of two `rows×cols` images,
/// with `C1 = (0.01L)²`, `C2 = (0.03L)²` and uniform window weights.
pub fn ssim2d(a: &[f64], b: &[f64], rows: usize, cols: usize, range: f64) -> Result<f64> {
    if a.len() != rows * cols || b.len() != rows * cols {
        return Err(Error::ShapeMismatch {
            op: "ssim2d",
            left: vec![a.len(), b.len()],
            right: vec![rows, cols],
        });
    }
    let w = SSIM_WINDOW;
    if rows < w || cols < w {
        return Err(invalid(format!("ssim needs images of at least {w}×{w}")));
    }
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let count = (w * w) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for r0 in 0..=rows - w {
        for c0 in 0..=cols - w {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in r0..r0 + w {
                for c in c0..c0 + w {
                    let (p, q) = (a[r * cols + c], b[r * cols + c]);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / count, sb / count);
            let va = saa / count - ma * ma;
            let vb = sbb / count - mb * mb;
            let cov = sab / count - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

/// Monte-Carlo or exact risk estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub mean: f64,
    /// Standard error of the mean over samples.
    pub stderr: f64,
    pub per_sample: Vec<f64>,
}

impl RiskEstimate {
    pub fn from_samples(per_sample: Vec<f64>) -> Self {
        let n = per_sample.len() as f64;
        let mean = per_sample.iter().sum::<f64>() / n;
        let var = if per_sample.len() > 1 {
            per_sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            stderr: (var / n).sqrt(),
            per_sample,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Uniform in the ℓ2 ball of the given radius.
    UniformBall,
    /// `N(0, σ²/m·I)`, so `E‖e‖² = σ²`.
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shift {
    /// `g ~ N(0, σ²_g/n·I)`.
    Gaussian { variance: f64 },
    /// The same `g` for every sample.
    Fixed { g: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PerturbationSpec {
    WorstCase {
        epsilon: f64,
        steps: usize,
        step_size: f64,
    },
    AverageCase {
        /// Ball radius, or `σ_e²` for Gaussian sampling.
        magnitude: f64,
        sampling: Sampling,
        #[serde(default = "default_draws")]
        draws: usize,
    },
    GeneralizationShift {
        shift: Shift,
        #[serde(default = "default_draws")]
        draws: usize,
    },
}

pub fn default_draws() -> usize {
    16
}

fn row_ranges(rows: usize) -> Vec<std::ops::Range<usize>> {
    par::chunks(rows, CHUNK)
}

/// Per-sample `‖x_i − H(y_i)‖²` over a dataset, given a way to build the
/// perturbed measurement chunk and the target chunk.
fn per_sample_errors<F>(solver: &Solver, data: &Dataset, exec: Execution, make: F) -> Result<Vec<f64>>
where
    F: Fn(std::ops::Range<usize>) -> Result<(Tensor, Tensor)> + Sync,
{
    let n = solver.signal_dim();
    let ranges = row_ranges(data.len());
    let parts = exec.map(ranges.len(), |c| -> Result<Vec<f64>> {
        let (target, y) = make(ranges[c].clone())?;
        let xhat = solver.reconstruct(&y)?;
        Ok((0..target.rows())
            .map(|r| sq_dist(&xhat.data()[r * n..(r + 1) * n], target.row(r)))
            .collect())
    });
    let mut out = Vec::with_capacity(data.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn rows_of(data: &Dataset, r: std::ops::Range<usize>) -> (Tensor, Tensor) {
    data.gather(&r.collect::<Vec<_>>())
}

/// `E‖x − H(y)‖²` on clean measurements.
pub fn clean_risk(solver: &Solver, data: &Dataset, exec: Execution) -> Result<RiskEstimate> {
    let errs = per_sample_errors(solver, data, exec, |r| Ok(rows_of(data, r)))?;
    Ok(RiskEstimate::from_samples(errs))
}

/// `E‖x − H(y + e)‖²` with random `e`; `draws` perturbations per sample,
/// each from the stream `(seed, EVAL, sample, draw)`.
pub fn avg_case_risk(
    solver: &Solver,
    data: &Dataset,
    magnitude: f64,
    sampling: Sampling,
    draws: usize,
    seed: u64,
    exec: Execution,
) -> Result<RiskEstimate> {
    if !(magnitude >= 0.0) || draws == 0 {
        return Err(invalid("average-case risk needs magnitude ≥ 0 and draws ≥ 1"));
    }
    let m = solver.measurement_dim();
    let errs = per_sample_errors(solver, data, exec, |r| {
        let (x, y) = rows_of(data, r.clone());
        let mut xs = Vec::with_capacity(r.len() * draws * x.row(0).len());
        let mut ys = Vec::with_capacity(r.len() * draws * m);
        for (local, i) in r.clone().enumerate() {
            for d in 0..draws {
                let mut s = rng::stream(seed, &[purpose::EVAL, i as u64, d as u64]);
                let e = match sampling {
                    Sampling::UniformBall => rng::uniform_ball(&mut s, magnitude, m),
                    Sampling::Gaussian => {
                        let mut e = vec![0.0; m];
                        rng::fill_normal(&mut s, (magnitude / m as f64).sqrt(), &mut e);
                        e
                    }
                };
                xs.extend_from_slice(x.row(local));
                ys.extend(y.row(local).iter().zip(&e).map(|(a, b)| a + b));
            }
        }
        let rows = r.len() * draws;
        Ok((Tensor::matrix(rows, xs.len() / rows, xs)?, Tensor::matrix(rows, m, ys)?))
    })?;
    let per_sample = errs
        .chunks(draws)
        .map(|c| c.iter().sum::<f64>() / draws as f64)
        .collect();
    Ok(RiskEstimate::from_samples(per_sample))
}

/// Worst-case risk: per sample, projected gradient ascent on `e` within
/// the ε-ball; returns the attacked losses and perturbations.
pub fn worst_case_risk(
    solver: &Solver,
    data: &Dataset,
    epsilon: f64,
    steps: usize,
    step_size: f64,
    exec: Execution,
) -> Result<(RiskEstimate, Tensor)> {
    let m = solver.measurement_dim();
    let ranges = row_ranges(data.len());
    let parts = exec.map(ranges.len(), |c| {
        let (x, y) = rows_of(data, ranges[c].clone());
        pgd_attack(solver, &x, &y, epsilon, steps, step_size)
    });
    let mut losses = Vec::with_capacity(data.len());
    let mut es = Vec::with_capacity(data.len() * m);
    for p in parts {
        let p = p?;
        losses.extend(p.losses);
        es.extend_from_slice(p.e.data());
    }
    Ok((
        RiskEstimate::from_samples(losses),
        Tensor::matrix(data.len(), m, es)?,
    ))
}

/// Attack on a single `(x, y)` pair.
pub fn worst_case_attack(
    solver: &Solver,
    x: &Tensor,
    y: &Tensor,
    epsilon: f64,
    steps: usize,
    step_size: f64,
) -> Result<(Tensor, f64)> {
    let n = solver.signal_dim();
    let m = solver.measurement_dim();
    let x = x.clone().reshape(&[1, n])?;
    let y = y.clone().reshape(&[1, m])?;
    let r = pgd_attack(solver, &x, &y, epsilon, steps, step_size)?;
    Ok((r.e.reshape(&[m])?, r.losses[0]))
}

/// `E‖x + g − H(y + A g)‖²`.
pub fn generalization_risk(
    solver: &Solver,
    data: &Dataset,
    shift: &Shift,
    draws: usize,
    seed: u64,
    exec: Execution,
) -> Result<RiskEstimate> {
    let n = solver.signal_dim();
    let m = solver.measurement_dim();
    let draws = match shift {
        Shift::Fixed { g } => {
            if g.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "generalization shift",
                    left: vec![g.len()],
                    right: vec![n],
                });
            }
            1
        }
        Shift::Gaussian { variance } => {
            if !(*variance >= 0.0) || draws == 0 {
                return Err(invalid("generalization risk needs σ²_g ≥ 0 and draws ≥ 1"));
            }
            draws
        }
    };
    let errs = per_sample_errors(solver, data, exec, |r| {
        let (x, y) = rows_of(data, r.clone());
        let mut xs = Vec::with_capacity(r.len() * draws * n);
        let mut ys = Vec::with_capacity(r.len() * draws * m);
        let mut ag = vec![0.0; m];
        for (local, i) in r.clone().enumerate() {
            for d in 0..draws {
                let g = match shift {
                    Shift::Fixed { g } => g.clone(),
                    Shift::Gaussian { variance } => {
                        let mut s = rng::stream(seed, &[purpose::EVAL, i as u64, d as u64, 1]);
                        let mut g = vec![0.0; n];
                        rng::fill_normal(&mut s, (variance / n as f64).sqrt(), &mut g);
                        g
                    }
                };
                solver.op.apply_row(&g, &mut ag);
                xs.extend(x.row(local).iter().zip(&g).map(|(a, b)| a + b));
                ys.extend(y.row(local).iter().zip(&ag).map(|(a, b)| a + b));
            }
        }
        let rows = r.len() * draws;
        Ok((Tensor::matrix(rows, n, xs)?, Tensor::matrix(rows, m, ys)?))
    })?;
    let per_sample = errs
        .chunks(draws)
        .map(|c| c.iter().sum::<f64>() / draws as f64)
        .collect();
    Ok(RiskEstimate::from_samples(per_sample))
}

/// Quality of reconstructions against ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityMetrics {
    /// Per-sample per-coordinate MSE.
    pub mse: Vec<f64>,
    pub psnr: Vec<f64>,
    /// Present when samples are 2-D images of at least 8×8.
    pub ssim: Option<Vec<f64>>,
    pub mean_mse: f64,
    pub mean_psnr: f64,
    pub mean_ssim: Option<f64>,
    pub peak: f64,
}

/// Per-sample MSE/PSNR/SSIM of `xhat` against `x` (both `[N×n]`).
pub fn quality(xhat: &Tensor, x: &Tensor, shape: &[usize], peak: f64) -> Result<QualityMetrics> {
    if xhat.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "quality",
            left: xhat.shape().to_vec(),
            right: x.shape().to_vec(),
        });
    }
    let rows = x.rows();
    let n = x.numel() / rows.max(1);
    let mse: Vec<f64> = (0..rows)
        .map(|r| sq_dist(xhat.row(r), x.row(r)) / n as f64)
        .collect();
    let psnr: Vec<f64> = mse.iter().map(|m| psnr_from_mse(*m, peak)).collect();
    let ssim = match shape {
        [h, w] if *h >= SSIM_WINDOW && *w >= SSIM_WINDOW => Some(
            (0..rows)
                .map(|r| ssim2d(xhat.row(r), x.row(r), *h, *w, peak))
                .collect::<Result<Vec<_>>>()?,
        ),
        _ => None,
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(QualityMetrics {
        mean_mse: mean(&mse),
        mean_psnr: mean(&psnr),
        mean_ssim: ssim.as_deref().map(mean),
        mse,
        psnr,
        ssim,
        peak,
    })
}

/// Dynamic range `max − min` of a ground-truth split, used as PSNR peak.
pub fn dynamic_range(x: &Tensor) -> f64 {
    let (lo, hi) = x
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    hi - lo
}
