//! Agreement metrics between ground-truth and predicted intensity series.

use crate::error::{Error, Result};

/// Ground truth and predictions for one intensity dimension.
#[derive(Clone, Copy, Debug)]
pub struct PairedSeries<'a> {
    pub truth: &'a [f64],
    pub predicted: &'a [f64],
}

impl<'a> PairedSeries<'a> {
    pub fn new(truth: &'a [f64], predicted: &'a [f64]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::InvalidArgument(format!(
                "series lengths differ: {} vs {}",
                truth.len(),
                predicted.len()
            )));
        }
        Ok(PairedSeries { truth, predicted })
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Icc {
    pub value: f64,
    /// Set when both series are constant and equal (`W + S = 0`); `value`
    /// is then 0.
    pub degenerate: bool,
}

/// ICC(3,1) in the form `(W − S) / (W + S)` with
/// `W = (1/N) Σ ((y − ŷ)² + (ỹ − ŷ)²)`, `S = Σ (y − ỹ)²` and
/// `ŷ = (1/2N) Σ (y + ỹ)`. `S` carries no `1/N` factor.
pub fn icc31(series: PairedSeries<'_>) -> Result<Icc> {
    let n = series.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("ICC needs at least 2 samples, got {n}")));
    }
    let nf = n as f64;
    let grand = series
        .truth
        .iter()
        .zip(series.predicted)
        .map(|(y, p)| y + p)
        .sum::<f64>()
        / (2.0 * nf);
    let mut within = 0.0;
    let mut sq = 0.0;
    for (&y, &p) in series.truth.iter().zip(series.predicted) {
        within += (y - grand).powi(2) + (p - grand).powi(2);
        sq += (y - p).powi(2);
    }
    let w = within / nf;
    let denom = w + sq;
    if denom == 0.0 {
        return Ok(Icc {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Icc {
        value: (w - sq) / denom,
        degenerate: false,
    })
}

pub fn mae(series: PairedSeries<'_>) -> Result<f64> {
    if series.is_empty() {
        return Err(Error::InvalidArgument("MAE of an empty series".into()));
    }
    Ok(series
        .truth
        .iter()
        .zip(series.predicted)
        .map(|(y, p)| (y - p).abs())
        .sum::<f64>()
        / series.len() as f64)
}
