#![allow(dead_code)]

use std::sync::Arc;

use jitterlu::nets::{Activation, Architecture, Net, NetRole, NetSpec};
use jitterlu::rng::{self, purpose};
use jitterlu::unroll::{Solver, UnrollConfig};
use jitterlu::{LinearOperator, OperatorSpec, Result, Tape, Tensor, Var};

/// Pass threshold of every finite-difference check.
pub const GRAD_TOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-6;

pub fn random_tensor(shape: &[usize], seed: u64, std: f64) -> Tensor {
    let n = shape.iter().product();
    let mut v = vec![0.0; n];
    rng::fill_normal(&mut rng::stream(seed, &[purpose::TRIAL, 7]), std, &mut v);
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Same as [`random_tensor`] but every entry is at least `gap` away from 0,
/// keeping finite differences off the relu kink.
pub fn off_kink(shape: &[usize], seed: u64, gap: f64) -> Tensor {
    let mut t = random_tensor(shape, seed, 1.0);
    t.data_mut().iter_mut().for_each(|v| *v = v.signum() * (v.abs() + gap));
    t
}

/// `Σ r ⊙ f(inputs)` for a fixed random `r`, so every output entry matters.
fn scalar<F>(inputs: &[Tensor], f: &F) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let shape = tape.value(out).shape().to_vec();
    let r = tape.constant(random_tensor(&shape, 99, 1.0));
    let prod = tape.mul(out, r)?;
    let loss = tape.sum(prod);
    Ok((tape, vars, loss))
}

/// Largest relative error `‖g_ad − g_fd‖ / max(‖g_ad‖, ‖g_fd‖)` over all
/// inputs, with central differences of step `1e-6`.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, vars, loss) = scalar(inputs, &f)?;
    let grads = tape.backward(loss)?;
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let (t, _, l) = scalar(xs, &f)?;
        Ok(t.value(l).item())
    };
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let ad = grads.tensor(*v);
        let mut fd = vec![0.0; inputs[i].numel()];
        for j in 0..fd.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            fd[j] = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
        }
        let diff: f64 = ad.data().iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = ad.norm().max(jitterlu::tensor::norm(&fd)).max(1e-12);
        worst = worst.max(diff / scale);
    }
    Ok(worst)
}

fn wavelet() -> Vec<f64> {
    vec![-0.3, 0.7, 1.0, 0.7, -0.3]
}

/// Solver gradient check with respect to the measurement and every weight.
fn solver_check(solver: &Solver, y: Tensor, noise: Option<Vec<Tensor>>) -> Result<f64> {
    let mut inputs = vec![y];
    inputs.extend(solver.net.params().iter().cloned());
    let target = random_tensor(&[solver.signal_dim()], 5, 1.0);
    gradcheck(&inputs, |tape, v| {
        let g = solver.graph(tape, &v[1..], v[0], noise.as_deref())?;
        let x = tape.constant(target.clone());
        tape.mse_loss(g.output, x)
    })
}

/// Every primitive and several full solvers, as `(name, relative error)`.
pub fn all_gradchecks() -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    let mut push = |name: &str, e: f64| out.push((name.to_string(), e));
    let a = random_tensor(&[3, 4], 1, 1.0);
    let b = random_tensor(&[3, 4], 2, 1.0);
    push("add", gradcheck(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]))?);
    push("sub", gradcheck(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]))?);
    push("mul", gradcheck(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]))?);
    push("scale", gradcheck(std::slice::from_ref(&a), |t, v| Ok(t.scale(v[0], -1.7)))?);
    push(
        "lin_comb",
        gradcheck(&[a.clone(), b.clone()], |t, v| t.lin_comb(&[(v[0], 0.3), (v[1], -2.0), (v[0], 1.1)]))?,
    );
    let m = random_tensor(&[3, 4], 3, 1.0);
    let x = random_tensor(&[4], 4, 1.0);
    push("matvec", gradcheck(&[m.clone(), x], |t, v| t.matvec(v[0], v[1]))?);
    let c = random_tensor(&[4, 5], 6, 1.0);
    push("matmul", gradcheck(&[m, c], |t, v| t.matmul(v[0], v[1]))?);
    for (name, fan_in, fan_out) in [("linear_wide", 3, 5), ("linear_narrow", 5, 3)] {
        let xb = random_tensor(&[4, fan_in], 8, 1.0);
        let w = random_tensor(&[fan_out, fan_in], 9, 1.0);
        let bias = random_tensor(&[fan_out], 10, 1.0);
        push(name, gradcheck(&[xb, w, bias], |t, v| t.linear(v[0], v[1], v[2]))?);
    }
    let sig = random_tensor(&[2, 3, 7], 11, 1.0);
    let ker = random_tensor(&[4, 3, 3], 12, 1.0);
    let kb = random_tensor(&[4], 13, 1.0);
    push("conv1d", gradcheck(&[sig.clone(), ker.clone(), kb], |t, v| t.conv1d(v[0], v[1], Some(v[2])))?);
    let sig1 = random_tensor(&[3, 7], 14, 1.0);
    push("conv1d_unbatched_nobias", gradcheck(&[sig1, ker], |t, v| t.conv1d(v[0], v[1], None))?);
    push("relu", gradcheck(&[off_kink(&[3, 4], 15, 1e-3)], |t, v| Ok(t.relu(v[0])))?);
    push("tanh", gradcheck(std::slice::from_ref(&a), |t, v| Ok(t.tanh(v[0])))?);
    push("mse_loss", gradcheck(&[a.clone(), b.clone()], |t, v| t.mse_loss(v[0], v[1]))?);
    push("sum", gradcheck(std::slice::from_ref(&a), |t, v| Ok(t.sum(v[0])))?);
    push("reshape", gradcheck(std::slice::from_ref(&a), |t, v| t.reshape(v[0], &[2, 6]))?);
    let op = Arc::new(LinearOperator::from_spec(&OperatorSpec::Convolution {
        wavelet: wavelet(),
        traces: 2,
        trace_len: 6,
    })?);
    let rows = random_tensor(&[3, 12], 16, 1.0);
    push("row_op", gradcheck(std::slice::from_ref(&rows), |t, v| t.row_op(v[0], op.clone(), false))?);
    push("row_op_adjoint", gradcheck(&[rows], |t, v| t.row_op(v[0], op.clone(), true))?);

    let mlp = |n: usize, act: Activation, role: NetRole, seed: u64| {
        Net::build(
            &NetSpec::new(Architecture::Mlp {
                widths: vec![n, 6, 6, n],
                activation: act,
            })
            .with_role(role),
            seed,
        )
    };
    let toy = Solver::new(
        Arc::new(LinearOperator::identity(2)),
        mlp(2, Activation::Tanh, NetRole::Gradient, 1)?,
        UnrollConfig::gd(10, 0.3),
    )?;
    push("solver_gd_identity", solver_check(&toy, random_tensor(&[2], 20, 1.0), None)?);
    let noise: Vec<Tensor> = (0..10).map(|i| random_tensor(&[2], 30 + i, 0.1)).collect();
    push("solver_gd_jittered", solver_check(&toy, random_tensor(&[2], 21, 1.0), Some(noise))?);
    let dense = LinearOperator::dense(3, 4, random_tensor(&[12], 22, 0.5).into_data())?;
    let gd_dense = Solver::new(
        Arc::new(dense.clone()),
        mlp(4, Activation::Tanh, NetRole::Gradient, 2)?,
        UnrollConfig::gd(4, 0.2),
    )?;
    push("solver_gd_dense", solver_check(&gd_dense, random_tensor(&[3], 23, 1.0), None)?);
    let pgd = Solver::new(
        Arc::new(dense),
        mlp(4, Activation::Tanh, NetRole::Proximal, 3)?,
        UnrollConfig::pgd(4, 0.2),
    )?;
    push("solver_pgd_dense", solver_check(&pgd, random_tensor(&[3], 24, 1.0), None)?);
    let conv = Solver::new(
        op,
        Net::build(
            &NetSpec::new(Architecture::Dncnn1d {
                depth: 3,
                channels: 3,
                kernel: 3,
                activation: Activation::Tanh,
                trace_len: 6,
            }),
            4,
        )?,
        UnrollConfig::gd(3, 0.1),
    )?;
    push("solver_gd_dncnn", solver_check(&conv, random_tensor(&[12], 25, 1.0), None)?);
    Ok(out)
}
