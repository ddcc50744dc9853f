use super::{grad_detached, Array, Result, Tape, Tensor, TensorError};

/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between the recorded gradient of `f` at `point` and
/// central differences `(f(x + h e) - f(x - h e)) / 2h` over every coordinate.
pub fn finite_difference_check<F>(f: F, point: &Array, step: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if !(step > 0.0) {
        return Err(TensorError::invalid("finite_difference_check", "step must be positive"));
    }
    let tape = Tape::new();
    let x = tape.var(point.clone());
    let y = f(&x)?;
    let analytic = grad_detached(&y, &[&x])?.remove(0);

    let mut worst = 0.0f64;
    let mut probe = point.as_standard_layout().into_owned();
    for i in 0..probe.len() {
        let orig = probe.as_slice().unwrap()[i];
        probe.as_slice_mut().unwrap()[i] = orig + step;
        let up = f(&Tensor::constant(probe.clone()))?.item();
        probe.as_slice_mut().unwrap()[i] = orig - step;
        let down = f(&Tensor::constant(probe.clone()))?.item();
        probe.as_slice_mut().unwrap()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}
