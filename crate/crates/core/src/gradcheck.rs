//! Finite-difference validation of reverse-mode gradients.
//!
//! Central differences cost two forward passes per checked entry but are
//! second-order accurate, which keeps the comparison tolerance tight enough
//! to catch sign and indexing mistakes without false alarms from roundoff.

use crate::graph::{Tape, Var};
use ndarray::ArrayD;

/// Analytic vs. central-difference gradients for a scalar-valued function.
///
/// `build` receives a fresh tape plus one leaf per input array and must
/// return a 0-d output node. Every entry of every input is perturbed by
/// `±eps`; the analytic gradient must match the central difference within
/// `abs_tol + rel_tol-style` slack on each entry.
///
/// # Panics
///
/// Panics with the offending input/entry index when any entry disagrees.
pub fn check_scalar_fn(
    inputs: &[ArrayD<f64>],
    build: impl Fn(&mut Tape, &[Var]) -> Var,
    eps: f64,
    abs_tol: f64,
) {
    let eval = |xs: &[ArrayD<f64>]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = build(&mut tape, &ids);
        tape.scalar_value(out)
    };

    // analytic gradients
    let mut tape = Tape::new();
    let ids: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = build(&mut tape, &ids);
    let grads = tape.backward(out);

    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(ids[k], x.shape());
        let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
        let flat_len = x.len();
        for idx in 0..flat_len {
            let orig = *work[k].iter().nth(idx).unwrap();
            set_flat(&mut work[k], idx, orig + eps);
            let plus = eval(&work);
            set_flat(&mut work[k], idx, orig - eps);
            let minus = eval(&work);
            set_flat(&mut work[k], idx, orig);
            let numeric = (plus - minus) / (2.0 * eps);
            let got = *analytic.iter().nth(idx).unwrap();
            let tol = abs_tol + 1e-4 * numeric.abs().max(got.abs());
            assert!(
                (got - numeric).abs() <= tol,
                "gradient mismatch at input {k} entry {idx}: analytic {got}, numeric {numeric}"
            );
        }
    }
}

fn set_flat(a: &mut ArrayD<f64>, idx: usize, v: f64) {
    *a.iter_mut().nth(idx).unwrap() = v;
}
