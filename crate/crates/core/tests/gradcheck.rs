mod common;

use common::{all_gradchecks, gradcheck, random_tensor, GRAD_TOL};

#[test]
fn every_primitive_and_solver_matches_finite_differences() {
    for (name, err) in all_gradchecks().unwrap() {
        assert!(err < GRAD_TOL, "{name}: relative error {err:.3e}");
    }
}

#[test]
fn gradcheck_detects_a_wrong_gradient() {
    // feeding the input back as a constant drops half of the product rule
    let a = random_tensor(&[4], 1, 1.0);
    let err = gradcheck(&[a], |t, v| {
        let c = t.constant(t.value(v[0]).clone());
        t.mul(v[0], c)
    })
    .unwrap();
    assert!(err > 0.1, "{err}");
}

#[test]
fn gradients_accumulate_over_reused_nodes() {
    let a = random_tensor(&[3], 2, 1.0);
    let err = gradcheck(&[a], |t, v| {
        let s = t.add(v[0], v[0])?;
        t.mul(s, v[0])
    })
    .unwrap();
    assert!(err < GRAD_TOL);
}
