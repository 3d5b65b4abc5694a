use jitterlu::linops::ricker_wavelet;
use jitterlu::tensor::dot;
use jitterlu::{LinearOperator, OperatorSpec, Tensor};
use proptest::prelude::*;

fn adjoint_gap(op: &LinearOperator, x: &[f64], u: &[f64]) -> f64 {
    let ax = op.apply(&Tensor::vector(x.to_vec())).unwrap();
    let atu = op.adjoint_apply(&Tensor::vector(u.to_vec())).unwrap();
    let lhs = dot(ax.data(), u);
    let rhs = dot(x, atu.data());
    (lhs - rhs).abs() / (1.0 + lhs.abs().max(rhs.abs()))
}

proptest! {
    #[test]
    fn dense_adjoint_identity(
        rows in 1usize..6,
        cols in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut vals = Vec::with_capacity(rows * cols + rows + cols);
        let mut s = seed;
        for _ in 0..rows * cols + rows + cols {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            vals.push(((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0);
        }
        let op = LinearOperator::dense(rows, cols, vals[..rows * cols].to_vec()).unwrap();
        let x = &vals[rows * cols..rows * cols + cols];
        let u = &vals[rows * cols + cols..];
        prop_assert!(adjoint_gap(&op, x, u) < 1e-12);
    }

    #[test]
    fn convolution_adjoint_identity(
        half in 0usize..4,
        traces in 1usize..4,
        trace_len in 1usize..12,
        w in prop::collection::vec(-1.0f64..1.0, 9),
        x in prop::collection::vec(-1.0f64..1.0, 48),
        u in prop::collection::vec(-1.0f64..1.0, 48),
    ) {
        let mut wavelet = w[..2 * half + 1].to_vec();
        wavelet[half] += 2.0;
        let op = LinearOperator::from_spec(&OperatorSpec::Convolution { wavelet, traces, trace_len }).unwrap();
        let n = traces * trace_len;
        prop_assert!(adjoint_gap(&op, &x[..n], &u[..n]) < 1e-12);
    }

    #[test]
    fn rayleigh_quotient_never_exceeds_mu(x in prop::collection::vec(-1.0f64..1.0, 64)) {
        let op = LinearOperator::from_spec(&OperatorSpec::Ricker {
            peak_frequency: 25.0, dt: 0.004, half_width: 12, traces: 2, trace_len: 32,
        }).unwrap();
        let ax = op.apply(&Tensor::vector(x.clone())).unwrap();
        let xx = dot(&x, &x);
        prop_assume!(xx > 1e-6);
        prop_assert!(dot(ax.data(), ax.data()) / xx <= op.mu() * (1.0 + 1e-9));
    }
}

#[test]
fn small_examples() {
    let id = LinearOperator::identity(2);
    assert_eq!(id.apply(&Tensor::vector(vec![0.3, -0.1])).unwrap().data(), &[0.3, -0.1]);
    assert_eq!(id.adjoint_apply(&Tensor::vector(vec![0.3, -0.1])).unwrap().data(), &[0.3, -0.1]);
    assert_eq!(id.mu(), 1.0);
    let d = LinearOperator::dense(2, 2, vec![2.0, 0.0, 0.0, 3.0]).unwrap();
    assert_eq!(d.apply(&Tensor::vector(vec![1.0, 1.0])).unwrap().data(), &[2.0, 3.0]);
    assert!((d.mu() - 9.0).abs() < 1e-9);
}

#[test]
fn ricker_zero_crossings() {
    let f = 25.0;
    let t0 = 1.0 / (std::f64::consts::PI * f * 2f64.sqrt());
    // sample exactly on the root: dt = t0, so w[±1] = 0
    let w = ricker_wavelet(f, t0, 3).unwrap();
    assert_eq!(w[3], 1.0);
    assert!(w[2].abs() < 1e-15 && w[4].abs() < 1e-15);
    assert_eq!(w[1], w[5]);
}
