//! Projected gradient ascent on measurement perturbations `e`, `‖e‖₂ ≤ ε`.

use crate::error::{invalid, Result};
use crate::tape::Tape;
use crate::tensor::{norm, sq_dist, Tensor};
use crate::unroll::Solver;

/// Per-row worst perturbation found and its loss `‖x − H(y + e)‖²`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    /// `[rows×m]`.
    pub e: Tensor,
    pub losses: Vec<f64>,
}

fn project_rows(e: &mut [f64], m: usize, eps: f64) {
    for row in e.chunks_mut(m) {
        let n = norm(row);
        if n > eps {
            let s = if n > 0.0 { eps / n } else { 0.0 };
            row.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Attacks every row of `x: [r×n]`, `y: [r×m]` independently.
///
/// Starts from `e = 0`, takes `steps` raw-gradient ascent steps of size
/// `step_size` through the full unrolled solver, each followed by exact
/// projection onto the ε-ball. The best iterate (including `e = 0`) is
/// returned per row, so the attacked loss is never below the clean loss.
pub fn pgd_attack(
    solver: &Solver,
    x: &Tensor,
    y: &Tensor,
    eps: f64,
    steps: usize,
    step_size: f64,
) -> Result<AttackResult> {
    if !(eps >= 0.0) {
        return Err(invalid("attack radius must be ≥ 0"));
    }
    let (n, m) = (solver.signal_dim(), solver.measurement_dim());
    let rows = y.numel() / m;
    let mut e = vec![0.0; rows * m];
    let mut best_e = e.clone();
    let mut best = vec![f64::NEG_INFINITY; rows];
    let passes = if eps == 0.0 { 0 } else { steps };
    for step in 0..=passes {
        let mut tape = Tape::new();
        let params = solver.net.register(&mut tape, false);
        let yv = tape.constant(y.clone());
        let ev = tape.param(Tensor::matrix(rows, m, e.clone())?);
        let ya = tape.add(yv, ev)?;
        let g = solver.graph(&mut tape, &params, ya, None)?;
        let out = tape.value(g.output).data();
        for r in 0..rows {
            let l = sq_dist(&out[r * n..(r + 1) * n], x.row(r));
            if l > best[r] {
                best[r] = l;
                best_e[r * m..(r + 1) * m].copy_from_slice(&e[r * m..(r + 1) * m]);
            }
        }
        if step == passes {
            break;
        }
        let xv = tape.constant(x.clone());
        let loss = tape.mse_loss(g.output, xv)?;
        let grads = tape.backward(loss)?;
        if let Some(ge) = grads.get(ev) {
            e.iter_mut().zip(ge).for_each(|(a, b)| *a += step_size * b);
        }
        project_rows(&mut e, m, eps);
    }
    Ok(AttackResult {
        e: Tensor::matrix(rows, m, best_e)?,
        losses: best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::LinearOperator;
    use crate::nets::{Net, NetRole};
    use crate::unroll::UnrollConfig;
    use std::sync::Arc;

    /// With a zero net, A = I and η = 1 the solver is `H(y) = y`.
    fn identity_solver() -> Solver {
        let net = Net::linear(Tensor::zeros(&[2, 2]), Tensor::zeros(&[2]), NetRole::Gradient).unwrap();
        Solver::new(Arc::new(LinearOperator::identity(2)), net, UnrollConfig::gd(3, 1.0)).unwrap()
    }

    #[test]
    fn zero_radius_returns_clean_loss() {
        let s = identity_solver();
        let x = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let y = Tensor::matrix(1, 2, vec![0.3, 0.4]).unwrap();
        let r = pgd_attack(&s, &x, &y, 0.0, 10, 0.1).unwrap();
        assert_eq!(r.e.data(), &[0.0, 0.0]);
        assert!((r.losses[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn linear_solver_analytic_maximizer() {
        let s = identity_solver();
        let x = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let y = Tensor::matrix(1, 2, vec![0.3, 0.4]).unwrap();
        let eps = 0.2;
        let r = pgd_attack(&s, &x, &y, eps, 50, 0.05).unwrap();
        let expected = (0.5f64 + eps).powi(2);
        assert!((r.losses[0] - expected).abs() < 1e-9, "{}", r.losses[0]);
        // e* is antiparallel to x − y
        let e = r.e.data();
        assert!((e[0] - eps * 0.6).abs() < 1e-9 && (e[1] - eps * 0.8).abs() < 1e-9);
    }
}
