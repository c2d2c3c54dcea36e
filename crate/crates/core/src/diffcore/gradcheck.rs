use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares an analytic gradient against central differences.
///
/// `f` returns the function value and its analytic gradient at a point.
/// The result is `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let (value, analytic) = f(point)?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            op: "grad_check function value".into(),
        });
    }
    if analytic.shape() != point.shape() {
        return Err(Error::shape(
            "grad_check",
            format!("gradient {:?} for point {:?}", analytic.shape(), point.shape()),
        ));
    }
    let eval = |p: &Tensor<f64>| -> Result<f64> {
        let v = f(p)?.0;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                op: "grad_check function value".into(),
            })
        }
    };
    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
