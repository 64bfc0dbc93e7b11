//! Central finite-difference gradient auditing, used by the test suites to
//! cross-check reverse-mode gradients in 64-bit mode.

use crate::tensor::Tensor;

/// Numerically differentiates `loss_fn` with respect to every element of
/// `params` using central differences with step `h`. `loss_fn` must evaluate
/// the loss from the parameters' current data.
pub fn central_diff(
    params: &[Tensor<f64>],
    h: f64,
    mut loss_fn: impl FnMut() -> f64,
) -> Vec<Vec<f64>> {
    let mut grads = Vec::with_capacity(params.len());
    for p in params {
        let n = p.numel();
        let mut g = vec![0.0; n];
        for j in 0..n {
            let orig = p.data()[j];
            p.data_mut()[j] = orig + h;
            let plus = loss_fn();
            p.data_mut()[j] = orig - h;
            let minus = loss_fn();
            p.data_mut()[j] = orig;
            g[j] = (plus - minus) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Largest relative error between two gradient sets, ignoring entries whose
/// magnitude falls below `min_mag` on both sides.
pub fn max_rel_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>], min_mag: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&x, &y) in a.iter().zip(n) {
            let mag = x.abs().max(y.abs());
            if mag <= min_mag {
                continue;
            }
            worst = worst.max((x - y).abs() / mag);
        }
    }
    worst
}

/// Per-parameter norm-relative error `||a - n|| / max(||a||, ||n||)`,
/// skipping parameters whose gradient norm falls below `min_norm` on both
/// sides. Central differences bottom out near 1e-11 absolute per component,
/// so individual near-zero entries are only meaningfully comparable in the
/// norm sense.
pub fn max_norm_rel_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>], min_norm: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        let (na, nn) = (norm(a), norm(n));
        if na.max(nn) <= min_norm {
            continue;
        }
        let diff: f64 = a
            .iter()
            .zip(n)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(diff / na.max(nn));
    }
    worst
}

/// Largest absolute disagreement across all components.
pub fn max_abs_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&x, &y) in a.iter().zip(n) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}
