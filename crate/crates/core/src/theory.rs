//! Numerical checks of the trajectory algebra behind jittered unrolling.
//!
//! For denoising (`A = I`) a GD step reads
//! `x_{k+1} = (1−η)x_k + ηy − ηf(x_k) − ηw_{k+1}`, so the difference between
//! two trajectories obeys a linear recursion with closed-form solution. The
//! checks below run both recursions, rebuild the perturbed trajectory from the
//! closed form using the recorded network outputs, and report the largest
//! deviation. Noise is indexed `w_1 … w_K`, with `w_1` entering the update that
//! produces `x_1`; `x₀` is never perturbed.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linops::LinearOperator;
use crate::nets::{Architecture, Net, NetRole};
use crate::rng::{self, purpose};
use crate::tensor::{dot, norm, Tensor};
use crate::unroll::{JitterSchedule, Solver, Trajectory, UnrollConfig, Variant, X0Rule};

/// Relative tolerance of the exact-algebra identities.
pub const IDENTITY_TOL: f64 = 1e-9;
/// Slack on the estimated network Lipschitz constant.
pub const LIPSCHITZ_SLACK: f64 = 0.05;

/// Outcome of one expansion identity check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionCheck {
    /// `x'_0 … x'_K` from the unperturbed measurement.
    pub clean: Vec<Vec<f64>>,
    /// Iterates of the perturbed or jittered recursion.
    pub perturbed: Vec<Vec<f64>>,
    /// The same iterates rebuilt from the closed-form expansion.
    pub expansion: Vec<Vec<f64>>,
    /// `δ_k = f(x'_k) − f(x_k)` for `k = 0 … K−1`.
    pub deltas: Vec<Vec<f64>>,
    /// `max_k ‖recursion_k − expansion_k‖∞`.
    pub deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn require_denoising_gd(solver: &Solver) -> Result<()> {
    if !solver.op.is_identity() {
        return Err(invalid("expansion identities assume the identity forward model"));
    }
    if solver.cfg.variant != Variant::Gd || solver.cfg.x0_rule != X0Rule::Adjoint {
        return Err(invalid("expansion identities assume GD unrolling with x₀ = y"));
    }
    Ok(())
}

fn rows(t: &[Tensor]) -> Vec<Vec<f64>> {
    t.iter().map(|x| x.data().to_vec()).collect()
}

fn max_dev(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(p, q)| p.iter().zip(q).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max)
}

/// `Σ_{i=0}^{k} η(1−η)^{k−i} δ_i` for every `k`, as a running sum.
fn geometric_sums(deltas: &[Vec<f64>], eta: f64) -> Vec<Vec<f64>> {
    let n = deltas.first().map_or(0, Vec::len);
    let mut acc = vec![0.0; n];
    deltas
        .iter()
        .map(|d| {
            acc.iter_mut()
                .zip(d)
                .for_each(|(a, di)| *a = (1.0 - eta) * *a + eta * di);
            acc.clone()
        })
        .collect()
}

fn finish(
    clean: &Trajectory,
    perturbed: &Trajectory,
    offsets: Vec<Vec<f64>>,
    scale: f64,
    eta: f64,
) -> ExpansionCheck {
    let deltas: Vec<Vec<f64>> = clean
        .net_outputs
        .iter()
        .zip(&perturbed.net_outputs)
        .map(|(a, b)| a.data().iter().zip(b.data()).map(|(p, q)| p - q).collect())
        .collect();
    let sums = geometric_sums(&deltas, eta);
    let clean_rows = rows(&clean.iterates);
    let mut expansion = Vec::with_capacity(clean_rows.len());
    for (k, xk) in clean_rows.iter().enumerate() {
        let s = if k == 0 { None } else { Some(&sums[k - 1]) };
        expansion.push(
            xk.iter()
                .enumerate()
                .map(|(j, v)| v + offsets[k][j] + s.map_or(0.0, |s| s[j]))
                .collect(),
        );
    }
    let perturbed_rows = rows(&perturbed.iterates);
    let deviation = max_dev(&perturbed_rows, &expansion);
    let tolerance = IDENTITY_TOL * (1.0 + scale);
    ExpansionCheck {
        clean: clean_rows,
        perturbed: perturbed_rows,
        expansion,
        deltas,
        deviation,
        tolerance,
        passed: deviation <= tolerance,
    }
}

/// Shifted measurement `y + g`:
/// `x_{k+1} = x'_{k+1} + g + Σ_{i=0}^{k} η(1−η)^{k−i}(f(x'_i) − f(x_i))`.
pub fn check_perturbation_expansion(solver: &Solver, y: &Tensor, g: &[f64]) -> Result<ExpansionCheck> {
    require_denoising_gd(solver)?;
    let yg = Tensor::vector(y.data().iter().zip(g).map(|(a, b)| a + b).collect());
    let clean = solver.unroll(y, None)?;
    let shifted = solver.unroll(&yg, None)?;
    let offsets = vec![g.to_vec(); clean.iterates.len()];
    Ok(finish(&clean, &shifted, offsets, y.norm(), solver.cfg.eta))
}

/// Attacked measurement `y + e`; the same algebra as a shift by `g := e`.
pub fn check_attack_expansion(solver: &Solver, y: &Tensor, e: &[f64]) -> Result<ExpansionCheck> {
    check_perturbation_expansion(solver, y, e)
}

/// Noise-accumulation terms `n_k = −Σ_{i=1}^{k} η(1−η)^{k−i} w_i` for
/// `k = 0 … K` (`n_0 = 0`).
pub fn noise_accumulation(noises: &[Tensor], eta: f64, n: usize) -> Vec<Vec<f64>> {
    let mut acc = vec![0.0; n];
    let mut out = vec![acc.clone()];
    for w in noises {
        acc.iter_mut()
            .zip(w.data())
            .for_each(|(a, wi)| *a = (1.0 - eta) * *a - eta * wi);
        out.push(acc.clone());
    }
    out
}

fn draw_noise(schedule: &JitterSchedule, n: usize, seed: u64) -> Vec<Tensor> {
    let mut r = rng::stream(seed, &[purpose::JITTER]);
    schedule
        .draw(&mut r, n)
        .into_iter()
        .map(Tensor::vector)
        .collect()
}

/// Jittered trajectory:
/// `x^{sgd}_{k+1} = x'_{k+1} + Σ_{i=0}^{k} η(1−η)^{k−i}(f(x'_i) − f(x^{sgd}_i))
///                  − Σ_{i=1}^{k+1} η(1−η)^{k+1−i} w_i`.
pub fn check_sgd_expansion(
    solver: &Solver,
    y: &Tensor,
    schedule: &JitterSchedule,
    seed: u64,
) -> Result<ExpansionCheck> {
    require_denoising_gd(solver)?;
    if schedule.len() != solver.cfg.k {
        return Err(invalid("jitter schedule length must equal K"));
    }
    let n = solver.signal_dim();
    let noise = draw_noise(schedule, n, seed);
    let clean = solver.unroll(y, None)?;
    let noisy = solver.unroll(y, Some(&noise))?;
    let offsets = noise_accumulation(&noise, solver.cfg.eta, n);
    Ok(finish(&clean, &noisy, offsets, y.norm(), solver.cfg.eta))
}

/// `s = Σ_{i=0}^{K−1} η(1−η)^{K−1−i}(f(x'_i) − f(x^{sgd}_i))`.
pub fn regularization_sum(clean: &Trajectory, noisy: &Trajectory, eta: f64) -> Result<Vec<f64>> {
    if clean.net_outputs.len() != noisy.net_outputs.len() || clean.net_outputs.is_empty() {
        return Err(invalid("regularization term needs matched, non-empty trajectories"));
    }
    let deltas: Vec<Vec<f64>> = clean
        .net_outputs
        .iter()
        .zip(&noisy.net_outputs)
        .map(|(a, b)| a.data().iter().zip(b.data()).map(|(p, q)| p - q).collect())
        .collect();
    Ok(geometric_sums(&deltas, eta).pop().expect("non-empty"))
}

/// `‖s‖²` for the sum above.
pub fn regularization_term(clean: &Trajectory, noisy: &Trajectory, eta: f64) -> Result<f64> {
    let s = regularization_sum(clean, noisy, eta)?;
    Ok(dot(&s, &s))
}

/// Per-sample risk decomposition `‖x − x^{sgd}_K‖² = ‖x − x'_K − s − n‖²`,
/// with the right side expanded term by term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub clean_risk: f64,
    pub regularization: f64,
    pub noise_energy: f64,
    /// `2⟨s, n⟩`, logged only.
    pub cross_term: f64,
    pub deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn check_risk_decomposition(
    solver: &Solver,
    x: &[f64],
    y: &Tensor,
    schedule: &JitterSchedule,
    seed: u64,
) -> Result<DecompositionCheck> {
    require_denoising_gd(solver)?;
    let n = solver.signal_dim();
    let eta = solver.cfg.eta;
    let noise = draw_noise(schedule, n, seed);
    let clean = solver.unroll(y, None)?;
    let noisy = solver.unroll(y, Some(&noise))?;
    let s = regularization_sum(&clean, &noisy, eta)?;
    let nk = noise_accumulation(&noise, eta, n).pop().expect("n_K");
    let d: Vec<f64> = x.iter().zip(clean.last().data()).map(|(a, b)| a - b).collect();
    let lhs = crate::tensor::sq_dist(x, noisy.last().data());
    let cross = 2.0 * dot(&s, &nk);
    let rhs = dot(&d, &d) + dot(&s, &s) + dot(&nk, &nk) - 2.0 * dot(&d, &s) - 2.0 * dot(&d, &nk) + cross;
    let deviation = (lhs - rhs).abs();
    let tolerance = IDENTITY_TOL * (1.0 + lhs);
    Ok(DecompositionCheck {
        lhs,
        rhs,
        clean_risk: dot(&d, &d),
        regularization: dot(&s, &s),
        noise_energy: dot(&nk, &nk),
        cross_term: cross,
        deviation,
        tolerance,
        passed: deviation <= tolerance,
    })
}

/// Constant `σ²_w` with `Σ_{i=0}^{k} η²(1−η)^{2(k−i)} σ²_w = σ²_g`:
/// `σ²_w = σ²_g (1−(1−η)²) / (η² (1−(1−η)^{2(k+1)}))`.
pub fn variance_matching_sigma(sigma_g2: f64, eta: f64, k: usize) -> Result<f64> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(invalid("variance matching needs η ∈ (0, 1]"));
    }
    if !(sigma_g2 >= 0.0) {
        return Err(invalid("σ²_g must be ≥ 0"));
    }
    // 1 − (1−η)² = η(2−η); 1 − (1−η)^{2(k+1)} via expm1/ln1p for small η.
    let num = eta * (2.0 - eta);
    let den = if eta == 1.0 {
        1.0
    } else {
        -(2.0 * (k + 1) as f64 * (-eta).ln_1p()).exp_m1()
    };
    Ok(sigma_g2 * num / (eta * eta * den))
}

/// Direct summation `Σ_{i=0}^{k} η²(1−η)^{2(k−i)} σ²_w`.
pub fn matched_variance_sum(sigma_w2: f64, eta: f64, k: usize) -> f64 {
    let q = (1.0 - eta) * (1.0 - eta);
    (0..=k)
        .map(|i| eta * eta * q.powi((k - i) as i32) * sigma_w2)
        .sum()
}

/// Result of probing `‖∇F(x+Δ) − ∇F(x)‖ ≤ (L̂(1+slack) + μ)‖Δ‖`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub l_hat: f64,
    pub mu: f64,
    pub slack: f64,
    pub probes: usize,
    pub violations: usize,
    /// Largest observed `‖∇F(x+Δ) − ∇F(x)‖ / ‖Δ‖`.
    pub max_ratio: f64,
    pub bound: f64,
    pub passed: bool,
}

/// `∇F(x) − Aᵀ(−y)` part that depends on `x`: `AᵀA x + f(x)` (the `y` terms
/// cancel in differences).
fn grad_f_diff(op: &LinearOperator, net: &Net, x: &[f64], d: &[f64]) -> Result<Vec<f64>> {
    let n = x.len();
    let mut ata = vec![0.0; n];
    op.normal_apply(d, &mut ata);
    let xd: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + b).collect();
    let f1 = net.eval(&Tensor::vector(xd))?;
    let f0 = net.eval(&Tensor::vector(x.to_vec()))?;
    Ok(ata
        .iter()
        .zip(f1.data().iter().zip(f0.data()))
        .map(|(a, (p, q))| a + p - q)
        .collect())
}

/// Probes the Lipschitz bound on `∇F(x) = Aᵀ(Ax − y) + f(x)`.
///
/// `L̂` comes from [`Net::lipschitz_estimate`] with `l_probes` probes and `μ`
/// from the operator. Points are drawn from `N(0, scale²I)` and offsets
/// have random directions and magnitudes between `10⁻⁴·scale` and `scale`.
pub fn check_lipschitz_f(
    op: &LinearOperator,
    net: &Net,
    probes: usize,
    l_probes: usize,
    scale: f64,
    seed: u64,
) -> Result<LipschitzReport> {
    let n = op.domain_dim();
    let l_hat = net.lipschitz_estimate(n, l_probes, scale, seed)?;
    let mu = op.mu();
    let bound = l_hat * (1.0 + LIPSCHITZ_SLACK) + mu;
    let mut violations = 0;
    let mut max_ratio = 0.0f64;
    for p in 0..probes {
        let mut r = rng::stream(seed, &[purpose::TRIAL, p as u64]);
        let mut x = vec![0.0; n];
        rng::fill_normal(&mut r, scale, &mut x);
        let mut d = vec![0.0; n];
        rng::fill_normal(&mut r, 1.0, &mut d);
        let mag = scale * 10f64.powf(rng::uniform(&mut r, -4.0, 0.0)) / norm(&d);
        d.iter_mut().for_each(|v| *v *= mag);
        let diff = grad_f_diff(op, net, &x, &d)?;
        let ratio = norm(&diff) / norm(&d);
        max_ratio = max_ratio.max(ratio);
        if ratio > bound {
            violations += 1;
        }
    }
    Ok(LipschitzReport {
        l_hat,
        mu,
        slack: LIPSCHITZ_SLACK,
        probes,
        violations,
        max_ratio,
        bound,
        passed: violations == 0,
    })
}

/// Quadratic potential `r(x) = ½xᵀBx` with symmetric positive semidefinite
/// `B`, so `f = ∇r = Bx` and every quantity of the convergence bound has a
/// closed form.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPotential {
    pub b: DMatrix<f64>,
}

impl SyntheticPotential {
    pub fn new(b: DMatrix<f64>) -> Result<Self> {
        if !b.is_square() || (&b - b.transpose()).abs().max() > 1e-12 * (1.0 + b.abs().max()) {
            return Err(invalid("synthetic potential needs a symmetric matrix"));
        }
        let min_eig = b.clone().symmetric_eigen().eigenvalues.min();
        if min_eig < -1e-12 {
            return Err(invalid("synthetic potential needs B ⪰ 0 so that inf r is finite"));
        }
        Ok(Self { b })
    }

    /// Random `B = MᵀM / n · scale`.
    pub fn random(n: usize, scale: f64, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[purpose::TRIAL, u64::MAX]);
        let mut m = vec![0.0; n * n];
        rng::fill_normal(&mut r, 1.0, &mut m);
        let m = DMatrix::from_row_slice(n, n, &m);
        let b = m.transpose() * &m * (scale / n as f64);
        let b = (&b + b.transpose()) * 0.5;
        Self { b }
    }

    pub fn lipschitz(&self) -> f64 {
        self.b.clone().symmetric_eigen().eigenvalues.max().max(0.0)
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.b * x))
    }

    pub fn net(&self) -> Result<Net> {
        let n = self.b.nrows();
        let w: Vec<f64> = self.b.transpose().iter().copied().collect();
        Net::linear(Tensor::matrix(n, n, w)?, Tensor::zeros(&[n]), NetRole::Gradient)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCertificate {
    pub l: f64,
    pub mu: f64,
    pub l_max: f64,
    pub k: usize,
    pub eta: f64,
    pub jitter_variance: f64,
    pub trials: usize,
    pub f_x0: f64,
    pub inf_f: f64,
    pub delta_star: f64,
    /// `min_k` of the Monte-Carlo mean of `‖∇F(x_k)‖²`.
    pub lhs: f64,
    pub lhs_stderr: f64,
    pub argmin_k: usize,
    pub rhs: f64,
    /// `lhs − 3·stderr ≤ rhs`.
    pub passed: bool,
}

/// Monte-Carlo check of
/// `min_{0≤k<K} E‖∇F(x_k)‖² ≤ √(2L·L_max/K)·(2(F(x₀) − inf F) + Δ*_F)`
/// for jittered GD with `η = √(2/(L·L_max·K))`.
///
/// `Δ*_F = F(x*) − inf ½‖y − Ax‖² − inf r`. When `L = 0` the net term
/// vanishes and `L = μ` (a valid upper Lipschitz constant) is used.
pub fn check_convergence_bound(
    op: &LinearOperator,
    potential: &SyntheticPotential,
    y: &[f64],
    k: usize,
    jitter_variance: f64,
    trials: usize,
    seed: u64,
) -> Result<ConvergenceCertificate> {
    let n = op.domain_dim();
    if potential.b.nrows() != n || y.len() != op.range_dim() || trials == 0 || k == 0 {
        return Err(invalid("convergence check: inconsistent dimensions or empty trials"));
    }
    let mu = op.mu();
    let mut l = potential.lipschitz();
    if l == 0.0 {
        l = mu;
    }
    let l_max = l.max(mu);
    let eta = (2.0 / (l * l_max * k as f64)).sqrt();

    let a = DMatrix::from_row_slice(op.range_dim(), n, op.to_dense().data());
    let yv = DVector::from_column_slice(y);
    let ata = a.transpose() * &a;
    let aty = a.transpose() * &yv;
    let f = |x: &DVector<f64>| 0.5 * (&yv - &a * x).norm_squared() + potential.value(x);
    let h = &ata + &potential.b;
    let x_star = h
        .clone()
        .svd(true, true)
        .solve(&aty, 1e-12)
        .map_err(|e| invalid(format!("closed-form minimizer: {e}")))?;
    let inf_f = f(&x_star);
    let x_ls = a
        .clone()
        .svd(true, true)
        .solve(&yv, 1e-12)
        .map_err(|e| invalid(format!("least squares: {e}")))?;
    let inf_data = 0.5 * (&yv - &a * &x_ls).norm_squared();
    let inf_r = 0.0;
    let delta_star = inf_f - inf_data - inf_r;
    let x0 = aty.clone();
    let f_x0 = f(&x0);
    let rhs = (2.0 * l * l_max / k as f64).sqrt() * (2.0 * (f_x0 - inf_f) + delta_star);

    let solver = Solver::new(
        std::sync::Arc::new(op.clone()),
        potential.net()?,
        UnrollConfig {
            k,
            eta,
            variant: Variant::Gd,
            x0_rule: X0Rule::Adjoint,
        },
    )?;
    let schedule = JitterSchedule::constant(k, jitter_variance)?;
    let y_t = Tensor::vector(y.to_vec());
    let grad_sq = |x: &[f64]| -> f64 {
        let xv = DVector::from_column_slice(x);
        (&h * &xv - &aty).norm_squared()
    };
    let mut sums = vec![0.0; k];
    let mut sq = vec![0.0; k];
    for t in 0..trials {
        let mut r = rng::stream(seed, &[purpose::TRIAL, t as u64]);
        let traj = if schedule.is_off() {
            solver.unroll(&y_t, None)?
        } else {
            let noise: Vec<Tensor> = schedule.draw(&mut r, n).into_iter().map(Tensor::vector).collect();
            solver.unroll(&y_t, Some(&noise))?
        };
        for (i, x) in traj.iterates[..k].iter().enumerate() {
            let g = grad_sq(x.data());
            sums[i] += g;
            sq[i] += g * g;
        }
    }
    let tn = trials as f64;
    let (argmin_k, lhs) = sums
        .iter()
        .map(|s| s / tn)
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, v)| if v < bv { (i, v) } else { (bi, bv) });
    let var = if trials > 1 {
        ((sq[argmin_k] / tn - lhs * lhs) * tn / (tn - 1.0)).max(0.0)
    } else {
        0.0
    };
    let lhs_stderr = (var / tn).sqrt();
    Ok(ConvergenceCertificate {
        l,
        mu,
        l_max,
        k,
        eta,
        jitter_variance,
        trials,
        f_x0,
        inf_f,
        delta_star,
        lhs,
        lhs_stderr,
        argmin_k,
        rhs,
        passed: lhs.is_finite() && rhs.is_finite() && lhs - 3.0 * lhs_stderr <= rhs,
    })
}

/// One named check in a verification report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub observed: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Random tanh MLP denoiser of dimension `n` for the identity checks.
pub fn random_tanh_solver(n: usize, hidden: usize, k: usize, eta: f64, seed: u64) -> Result<Solver> {
    let spec = crate::nets::NetSpec::new(Architecture::Mlp {
        widths: vec![n, hidden, hidden, n],
        activation: crate::nets::Activation::Tanh,
    });
    Solver::new(
        std::sync::Arc::new(LinearOperator::identity(n)),
        Net::build(&spec, seed)?,
        UnrollConfig::gd(k, eta),
    )
}

/// The exact-identity suite over seeds × K × η: perturbation, attack and
/// jitter expansions plus the per-sample risk decomposition.
pub fn identity_suite(seeds: &[u64], ks: &[usize], etas: &[f64]) -> Result<Vec<CheckRecord>> {
    let mut out = Vec::new();
    let n = 2;
    for &seed in seeds {
        for &k in ks {
            for &eta in etas {
                let solver = random_tanh_solver(n, 32, k, eta, seed)?;
                let mut r = rng::stream(seed, &[purpose::TRIAL, k as u64, eta.to_bits()]);
                let mut v = vec![0.0; 4 * n];
                rng::fill_normal(&mut r, 1.0, &mut v);
                let y = Tensor::vector(v[..n].to_vec());
                let g: Vec<f64> = v[n..2 * n].iter().map(|a| 0.1 * a).collect();
                let e: Vec<f64> = v[2 * n..3 * n].iter().map(|a| 0.05 * a).collect();
                let x = &v[3 * n..];
                let schedule = JitterSchedule::constant(k, 0.1)?;
                let tag = format!("seed={seed},K={k},eta={eta}");
                let p = check_perturbation_expansion(&solver, &y, &g)?;
                out.push(CheckRecord {
                    name: format!("perturbation_expansion[{tag}]"),
                    observed: p.deviation,
                    tolerance: p.tolerance,
                    passed: p.passed,
                });
                let a = check_attack_expansion(&solver, &y, &e)?;
                out.push(CheckRecord {
                    name: format!("attack_expansion[{tag}]"),
                    observed: a.deviation,
                    tolerance: a.tolerance,
                    passed: a.passed,
                });
                let s = check_sgd_expansion(&solver, &y, &schedule, seed)?;
                out.push(CheckRecord {
                    name: format!("sgd_expansion[{tag}]"),
                    observed: s.deviation,
                    tolerance: s.tolerance,
                    passed: s.passed,
                });
                let d = check_risk_decomposition(&solver, x, &y, &schedule, seed)?;
                out.push(CheckRecord {
                    name: format!("risk_decomposition[{tag}]"),
                    observed: d.deviation,
                    tolerance: d.tolerance,
                    passed: d.passed,
                });
            }
        }
    }
    Ok(out)
}

/// `‖∇F(x+v) − ∇F(x)‖ / ‖v‖` along the top eigenvector of `AᵀA + B`, the
/// direction where the bound `L + μ` is attained when `A = I`.
pub fn top_direction_ratio(op: &LinearOperator, potential: &SyntheticPotential) -> Result<f64> {
    let n = op.domain_dim();
    let net = potential.net()?;
    let a = DMatrix::from_row_slice(op.range_dim(), n, op.to_dense().data());
    let h = a.transpose() * &a + &potential.b;
    let eig = h.symmetric_eigen();
    let top = eig.eigenvalues.imax();
    let v: Vec<f64> = eig.eigenvectors.column(top).iter().copied().collect();
    let diff = grad_f_diff(op, &net, &vec![0.0; n], &v)?;
    Ok(norm(&diff) / norm(&v))
}

fn record(name: String, observed: f64, tolerance: f64, passed: bool) -> CheckRecord {
    CheckRecord {
        name,
        observed,
        tolerance,
        passed,
    }
}

/// Relative error of variance matching against direct summation over an
/// η grid covering `(0, 1]` and every `k ≤ 50`.
pub fn variance_matching_suite() -> Vec<CheckRecord> {
    let etas = [1e-4, 1e-3, 0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99, 1.0];
    let mut out = Vec::new();
    for &eta in &etas {
        let worst = (0..=50)
            .map(|k| {
                let w = variance_matching_sigma(1.0, eta, k).expect("η in range");
                (matched_variance_sum(w, eta, k) - 1.0).abs()
            })
            .fold(0.0, f64::max);
        out.push(record(format!("variance_matching[eta={eta}]"), worst, 1e-12, worst <= 1e-12));
    }
    out
}

/// Random dense `n×n` operator with entries `N(0, 1/n)`.
pub fn random_dense_operator(n: usize, seed: u64) -> Result<LinearOperator> {
    let mut r = rng::stream(seed, &[purpose::TRIAL, u64::MAX - 1]);
    let mut v = vec![0.0; n * n];
    rng::fill_normal(&mut r, 1.0 / (n as f64).sqrt(), &mut v);
    LinearOperator::dense(n, n, v)
}

/// Lipschitz probes on a random toy tanh MLP and on quadratic synthetics,
/// plus tightness of the bound for `A = I` along the top direction.
pub fn lipschitz_suite(probes: usize, seed: u64) -> Result<Vec<CheckRecord>> {
    let mut out = Vec::new();
    let toy = random_tanh_solver(2, 32, 10, 0.1, seed)?;
    let r = check_lipschitz_f(&toy.op, &toy.net, probes, 64, 1.0, seed)?;
    out.push(record(
        "lipschitz[toy_mlp]".into(),
        r.max_ratio,
        r.bound,
        r.passed,
    ));
    let n = 4;
    let pot = SyntheticPotential::random(n, 1.0, seed);
    for (label, op) in [
        ("identity", LinearOperator::identity(n)),
        ("dense", random_dense_operator(n, seed)?),
    ] {
        let r = check_lipschitz_f(&op, &pot.net()?, probes, 64, 1.0, seed)?;
        out.push(record(format!("lipschitz[quadratic,{label}]"), r.max_ratio, r.bound, r.passed));
    }
    let id = LinearOperator::identity(n);
    let ratio = top_direction_ratio(&id, &pot)?;
    let bound = pot.lipschitz() + id.mu();
    let dev = (ratio - bound).abs() / bound;
    out.push(record("lipschitz_tightness[quadratic,identity]".into(), dev, 1e-9, dev <= 1e-9));
    Ok(out)
}

/// Convergence certificates on quadratic synthetics for `K ∈ ks` and the
/// given jitter variances.
pub fn convergence_suite(
    ks: &[usize],
    variances: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<(String, ConvergenceCertificate)>> {
    let n = 4;
    let pot = SyntheticPotential::random(n, 1.0, seed);
    let mut r = rng::stream(seed, &[purpose::TRIAL, u64::MAX - 2]);
    let mut y = vec![0.0; n];
    rng::fill_normal(&mut r, 1.0, &mut y);
    let mut out = Vec::new();
    for (label, op) in [
        ("identity", LinearOperator::identity(n)),
        ("dense", random_dense_operator(n, seed)?),
    ] {
        for &k in ks {
            for &v in variances {
                let c = check_convergence_bound(&op, &pot, &y, k, v, trials, seed)?;
                out.push((format!("convergence[{label},K={k},var={v}]"), c));
            }
        }
    }
    Ok(out)
}

/// Everything the `verify` command runs.
pub fn verify_all(seed: u64) -> Result<Vec<CheckRecord>> {
    let seeds: Vec<u64> = (0..20).map(|s| seed + s).collect();
    let mut out = identity_suite(&seeds, &[1, 2, 10], &[0.1, 0.5, 1.0])?;
    out.extend(variance_matching_suite());
    out.extend(lipschitz_suite(1000, seed)?);
    for (name, c) in convergence_suite(&[10, 100], &[0.0, 1e-3], 200, seed)? {
        out.push(record(name, c.lhs, c.rhs, c.passed));
    }
    Ok(out)
}
