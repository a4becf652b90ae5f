//! RMSE and MAPE of point forecasts.

use serde::{Deserialize, Serialize};

use super::EvalError;

/// Scores of one forecast stream. Rows with a zero actual are kept in the
/// RMSE but excluded from the MAPE and counted in `zero_actuals`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    /// In percent; NaN when every actual is zero.
    pub mape: f64,
    pub n: usize,
    pub zero_actuals: usize,
}

/// `RMSE = sqrt(mean (y − ŷ)²)` and `MAPE = 100 · mean |y − ŷ| / |y|`.
pub fn metrics(y: &[f64], yhat: &[f64]) -> Result<Metrics, EvalError> {
    if y.len() != yhat.len() {
        return Err(EvalError::LengthMismatch { expected: y.len(), got: yhat.len() });
    }
    if y.is_empty() {
        return Err(EvalError::EmptySample);
    }
    if y.iter().chain(yhat).any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let n = y.len();
    let sse: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum();
    let mut ape = 0.0;
    let mut zero = 0;
    for (a, b) in y.iter().zip(yhat) {
        if *a == 0.0 {
            zero += 1;
        } else {
            ape += ((a - b) / a).abs();
        }
    }
    if zero > 0 {
        log::warn!("{zero} zero actual(s) excluded from the MAPE");
    }
    let mape = if zero == n { f64::NAN } else { 100.0 * ape / (n - zero) as f64 };
    Ok(Metrics { rmse: (sse / n as f64).sqrt(), mape, n, zero_actuals: zero })
}
