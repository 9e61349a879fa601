//! Central-difference gradient oracle.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate `i`.
pub fn finite_difference_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    let partial = finite_difference_at(&mut f, x, h, &coords)?;
    Tensor::new(x.shape().to_vec(), partial)
}

/// Central differences restricted to `coords`; returns one value per coordinate.
pub fn finite_difference_at<F>(mut f: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(TensorError::InvalidArgument { op: "finite_difference", msg: format!("step {h}") });
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        if i >= x.numel() {
            return Err(TensorError::OutOfRange { op: "finite_difference", index: i, extent: x.numel() });
        }
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(TensorError::NonFinite(format!("objective at coordinate {i}")));
        }
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or the absolute gap when both are tiny.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}
