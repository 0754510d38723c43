//! Central finite differences, the reference oracle for every gradient in
//! this crate. Kept independent of the tape: it only ever calls a black-box
//! scalar function.

use ndarray::ArrayD;

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_grad<F>(mut f: F, x: &ArrayD<f64>, h: f64) -> ArrayD<f64>
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let orig = probe.as_slice_mut().unwrap()[idx];
        probe.as_slice_mut().unwrap()[idx] = orig + h;
        let fp = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig - h;
        let fm = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Worst-case element-wise relative error between two gradients.
///
/// The denominator is floored at 1e-3 so near-zero entries are compared with
/// an effective absolute tolerance instead of blowing up the ratio.
pub fn max_rel_error(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shape mismatch");
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
        .fold(0.0, f64::max)
}
