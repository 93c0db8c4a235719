//! Shared helpers for gradient tests: random tensors and central
//! finite-difference verification of tape graphs.

use crate::tape::{Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
}

/// Rebuilds a scalar graph under central perturbation of every input entry
/// and compares the finite-difference slope against the tape gradient.
pub fn check_grads(
    build: impl Fn(&Tape<f64>, &[Var]) -> Var,
    inputs: &[ArrayD<f64>],
    eps: f64,
    tol: f64,
) {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let out = build(&tape, &vars);
    let grads = tape.backward(out);

    let eval = |perturbed: &[ArrayD<f64>]| -> f64 {
        let t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|v| t.param(v.clone())).collect();
        let o = build(&t, &vs);
        t.scalar_value(o)
    };

    for (vi, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, inputs[vi].shape());
        for k in 0..inputs[vi].len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[vi].as_slice_mut().unwrap()[k] += eps;
            minus[vi].as_slice_mut().unwrap()[k] -= eps;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let an = analytic.as_slice().unwrap()[k];
            let denom = an.abs().max(fd.abs()).max(1.0);
            assert!(
                (an - fd).abs() / denom < tol,
                "input {vi} entry {k}: analytic {an} vs fd {fd}"
            );
        }
    }
}
