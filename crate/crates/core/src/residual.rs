//! AR(p) models of forecast residuals, optionally on first differences,
//! selected by AIC, and the short-term correction they add to a base
//! forecast.

use nalgebra::linalg::Schur;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_ORDER: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum ResidualError {
    #[error("series of length {len} is too short for order up to {max_p}")]
    TooShort { len: usize, max_p: usize },
    #[error("need {needed} recent values, got {got}")]
    InsufficientLags { needed: usize, got: usize },
    #[error("fitted model is not stationary")]
    NonStationaryFit,
    #[error("order {0} exceeds the maximum of 10")]
    OrderTooLarge(usize),
    #[error("series contains non-finite values")]
    NonFinite,
}

/// `z_t = c + Σ φ_i (z_{t-i} − c) + e_t` where `z` is the series (`d = 0`)
/// or its first difference (`d = 1`) and `c` is `mean`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArModel {
    pub p: usize,
    pub d: usize,
    pub phi: Vec<f64>,
    /// Centering constant; zero unless fitted with [`Centering::Mean`].
    #[serde(default)]
    pub mean: f64,
    pub sigma2: f64,
    pub aic: f64,
}

/// Whether the AR regression is centered on the sample mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Centering {
    /// For residuals, which have zero mean by construction; the correction
    /// is then linear in the recent residuals.
    None,
    /// For raw levels; differenced candidates are never centered.
    Mean,
}

impl ArModel {
    pub fn white_noise() -> Self {
        Self { p: 0, d: 0, phi: Vec::new(), mean: 0.0, sigma2: 0.0, aic: f64::NAN }
    }

    /// Spectral radius of the companion matrix of `φ`.
    pub fn spectral_radius(&self) -> f64 {
        spectral_radius(&self.phi)
    }

    /// Number of trailing observations needed to forecast.
    pub fn lags_needed(&self) -> usize {
        self.p + self.d
    }

    /// Forecasts `z` for `horizon` steps after `recent` (oldest first) and
    /// returns the forecast of the original series at the last step.
    pub fn forecast(&self, recent: &[f64], horizon: usize) -> Result<f64, ResidualError> {
        let needed = self.lags_needed().max(self.d);
        if recent.len() < needed {
            return Err(ResidualError::InsufficientLags { needed, got: recent.len() });
        }
        if horizon == 0 {
            return Ok(*recent.last().unwrap_or(&0.0));
        }
        let tail = &recent[recent.len() - needed..];
        let mut z: Vec<f64> = if self.d == 1 { tail.windows(2).map(|w| w[1] - w[0]).collect() } else { tail.to_vec() };
        let mut level = if self.d == 1 { *tail.last().unwrap_or(&0.0) } else { 0.0 };
        let mut out = 0.0;
        for _ in 0..horizon {
            let next = self.mean
                + self.phi.iter().enumerate().map(|(i, f)| f * (z[z.len() - 1 - i] - self.mean)).sum::<f64>();
            z.push(next);
            if self.d == 1 {
                level += next;
                out = level;
            } else {
                out = next;
            }
        }
        Ok(out)
    }
}

fn spectral_radius(phi: &[f64]) -> f64 {
    let p = phi.iter().rposition(|f| *f != 0.0).map_or(0, |i| i + 1);
    if p == 0 {
        return 0.0;
    }
    let mut c = DMatrix::<f64>::zeros(p, p);
    for (j, f) in phi[..p].iter().enumerate() {
        c[(0, j)] = *f;
    }
    for i in 1..p {
        c[(i, i - 1)] = 1.0;
    }
    match Schur::try_new(c, f64::EPSILON, 10_000) {
        Some(schur) => schur.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max),
        None => f64::NAN,
    }
}

/// Conditional least-squares fit of one `(p, d)` candidate on targets
/// `z_t`, `t ∈ start..`.
fn fit_candidate(z: &[f64], start: usize, p: usize, center: f64) -> (Vec<f64>, f64) {
    let n = z.len() - start;
    if p == 0 {
        let s2 = z[start..].iter().map(|v| (v - center).powi(2)).sum::<f64>() / n as f64;
        return (Vec::new(), s2);
    }
    let x = DMatrix::from_fn(n, p, |r, c| z[start + r - 1 - c] - center);
    let y = DVector::from_fn(n, |r, _| z[start + r] - center);
    let xtx = x.tr_mul(&x);
    let xty = x.tr_mul(&y);
    let scale = (0..p).map(|i| xtx[(i, i)]).fold(0.0, f64::max);
    let phi = if scale > 0.0 {
        match xtx.clone().cholesky() {
            Some(c) => c.solve(&xty),
            None => xtx.svd(true, true).solve(&xty, 1e-12 * scale).unwrap_or_else(|_| DVector::zeros(p)),
        }
    } else {
        DVector::zeros(p)
    };
    let s2 = (y - x * &phi).norm_squared() / n as f64;
    (phi.iter().copied().collect(), s2)
}

/// AIC-selected AR model over `p ≤ max_p`, `d ∈ {0, 1}`, all candidates
/// scored on the same target rows. Ties keep the simpler candidate.
pub fn fit_ar_with(series: &[f64], max_p: usize, centering: Centering) -> Result<ArModel, ResidualError> {
    if max_p > MAX_ORDER {
        return Err(ResidualError::OrderTooLarge(max_p));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(ResidualError::NonFinite);
    }
    let n = series.len();
    if n < (5 * max_p).max(max_p + 3) {
        return Err(ResidualError::TooShort { len: n, max_p });
    }
    let diff: Vec<f64> = series.windows(2).map(|w| w[1] - w[0]).collect();
    // Original index of the first target is max_p + 1 for both d.
    let first = max_p + 1;
    let n_eff = (n - first) as f64;
    let floor = f64::MIN_POSITIVE;
    let mut best: Option<ArModel> = None;
    for d in 0..=1 {
        let (z, start): (&[f64], usize) = if d == 0 { (series, first) } else { (&diff, first - 1) };
        let center = match (centering, d) {
            (Centering::Mean, 0) => z[start - max_p..].iter().sum::<f64>() / (n - first + max_p) as f64,
            _ => 0.0,
        };
        for p in 0..=max_p {
            let (phi, s2) = fit_candidate(z, start, p, center);
            if p > 0 && !(spectral_radius(&phi) < 1.0) {
                log::debug!("discarding non-stationary AR({p}) with d = {d}");
                continue;
            }
            let aic = n_eff * s2.max(floor).ln() + 2.0 * (p as f64 + 1.0);
            let aic = if s2 <= floor { f64::NEG_INFINITY } else { aic };
            if best.as_ref().is_none_or(|b| aic < b.aic) {
                best = Some(ArModel { p, d, phi, mean: center, sigma2: s2, aic });
            }
        }
    }
    best.ok_or(ResidualError::NonStationaryFit)
}

/// [`fit_ar_with`] without centering, for zero-mean residual series.
pub fn fit_ar(residuals: &[f64], max_p: usize) -> Result<ArModel, ResidualError> {
    fit_ar_with(residuals, max_p, Centering::None)
}

/// `base + ĥ`, where `ĥ` is the `horizon`-step forecast of the residual
/// process from `recent_residuals` (oldest first).
pub fn correct_forecast(base: f64, model: &ArModel, recent_residuals: &[f64], horizon: usize) -> Result<f64, ResidualError> {
    if model.p == 0 && model.d == 0 {
        return Ok(base + model.mean);
    }
    Ok(base + model.forecast(recent_residuals, horizon)?)
}
