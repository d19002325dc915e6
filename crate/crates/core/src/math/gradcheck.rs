use super::array::NumericArray;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_diff_grad<F>(f: F, x: &NumericArray, h: f64) -> Result<NumericArray>
where
    F: Fn(&NumericArray) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!("finite difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = NumericArray::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "f evaluated to {plus} / {minus} around coordinate {i}"
            )));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference when both are tiny.
pub fn relative_error(a: &NumericArray, b: &NumericArray) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.frobenius_norm().max(b.frobenius_norm());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}
