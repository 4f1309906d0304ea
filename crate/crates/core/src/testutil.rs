//! Shared helpers for unit tests.

use crate::tensor::{with_no_grad, Tensor};

/// Central-difference gradient check in double precision.
///
/// Rebuilds the loss through `loss_fn` for every perturbed coordinate and
/// compares the analytic gradient against `(f(x+h) - f(x-h)) / 2h` with
/// `h = 1e-4`, requiring relative error below `1e-4`.
pub(crate) fn grad_check(params: &[&Tensor<f64>], loss_fn: &dyn Fn() -> Tensor<f64>) {
    for p in params {
        p.zero_grad();
    }
    let loss = loss_fn();
    loss.backward().unwrap();
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let h = 1e-4;
    for (pi, p) in params.iter().enumerate() {
        let base = p.values();
        for j in 0..base.len() {
            let mut plus = base.clone();
            plus[j] += h;
            p.set_values(plus).unwrap();
            let fp = with_no_grad(loss_fn).item().unwrap();
            let mut minus = base.clone();
            minus[j] -= h;
            p.set_values(minus).unwrap();
            let fm = with_no_grad(loss_fn).item().unwrap();
            p.set_values(base.clone()).unwrap();

            let fd = (fp - fm) / (2.0 * h);
            let an = analytic[pi][j];
            let denom = fd.abs().max(an.abs()).max(1.0);
            assert!(
                ((fd - an) / denom).abs() < 1e-4,
                "param {pi} coord {j}: analytic {an} vs finite-difference {fd}"
            );
        }
        p.zero_grad();
    }
}

/// Deterministic pseudo-random values in [-1, 1) for building test inputs
/// without touching the model RNG.
pub(crate) fn pseudo_random(n: usize, seed: u64) -> Vec<f64> {
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
    (0..n)
        .map(|_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}
