//! Online adaptation of the correction `θ_t` applied to the frozen,
//! normalized effect vector `f(x_t) = (1, f̄₁, …, f̄_d)`.
//!
//! Two estimators are provided: least squares with exponential forgetting
//! and a Kalman filter in scaled units (`σ² = 1`, `P* = P/σ²`,
//! `Q* = Q/σ²`), with static, dynamic and break variants. The dynamic
//! state noise is chosen by a greedy likelihood search over diagonal
//! matrices with entries in `{0} ∪ {2^j : -30 ≤ j ≤ 0}`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gam::{FittedGam, GamError};
use crate::table::{col, TableError, TimeTable};

/// Exponents tried for each diagonal entry of `Q*`, besides zero.
pub const Q_EXPONENTS: std::ops::RangeInclusive<i32> = -30..=0;
/// Upper bound on greedy rounds; keeps a search under 10⁴ evaluations.
pub const MAX_GREEDY_ROUNDS: usize = 30;
/// Default ridge for exp-LS.
pub const DEFAULT_EPSILON: f64 = 1e-8;
/// Relative floor of the profiled innovation variance.
const SIGMA2_FLOOR: f64 = 1e-20;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("non-finite input at step {0}")]
    NonFiniteInput(usize),
    #[error("likelihood is not finite")]
    NonFiniteLikelihood,
    #[error("Gram matrix is singular; increase the ridge epsilon")]
    SingularGram,
    #[error("normal equations for the initial state are singular")]
    SingularSystem,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("history is empty")]
    EmptyHistory,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Gam(#[from] GamError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn check_len(expected: usize, got: usize) -> Result<(), AdaptError> {
    if expected != got {
        return Err(AdaptError::DimensionMismatch { expected, got });
    }
    Ok(())
}

fn check_history(features: &[DVector<f64>], targets: &[f64]) -> Result<usize, AdaptError> {
    check_len(features.len(), targets.len())?;
    let dim = features.first().ok_or(AdaptError::EmptyHistory)?.len();
    for f in features {
        check_len(dim, f.len())?;
    }
    Ok(dim)
}

// ---------------------------------------------------------------------------
// exp-LS

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpLsConfig {
    /// Forgetting factor; `0` is ordinary least squares, `∞` keeps only the
    /// newest row.
    pub mu: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

impl ExpLsConfig {
    pub fn new(mu: f64) -> Self {
        Self { mu, epsilon: DEFAULT_EPSILON }
    }

    fn validate(&self) -> Result<(), AdaptError> {
        if self.mu.is_nan() || self.mu < 0.0 || !(self.epsilon >= 0.0) {
            return Err(AdaptError::InvalidConfig(format!("mu {} / epsilon {}", self.mu, self.epsilon)));
        }
        Ok(())
    }
}

/// Exponentially decayed normal equations. The newest row has weight 1 and
/// a row `k` steps older has weight `e^{-μk}`.
#[derive(Debug, Clone)]
pub struct ExpLs {
    config: ExpLsConfig,
    decay: f64,
    gram: DMatrix<f64>,
    moment: DVector<f64>,
    rows: usize,
}

impl ExpLs {
    pub fn new(dim: usize, config: ExpLsConfig) -> Result<Self, AdaptError> {
        config.validate()?;
        Ok(Self {
            config,
            decay: (-config.mu).exp(),
            gram: DMatrix::zeros(dim, dim),
            moment: DVector::zeros(dim),
            rows: 0,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn update(&mut self, f: &DVector<f64>, y: f64) -> Result<(), AdaptError> {
        check_len(self.moment.len(), f.len())?;
        if !y.is_finite() || f.iter().any(|v| !v.is_finite()) {
            return Err(AdaptError::NonFiniteInput(self.rows));
        }
        self.gram *= self.decay;
        self.moment *= self.decay;
        self.gram.ger(1.0, f, f, 1.0);
        self.moment.axpy(y, f, 1.0);
        self.rows += 1;
        Ok(())
    }

    /// Current estimate `argmin Σ w_s (y_s − θᵀf_s)² + ε‖θ‖²`.
    pub fn theta(&self) -> Result<DVector<f64>, AdaptError> {
        if self.rows == 0 {
            return Err(AdaptError::EmptyHistory);
        }
        solve_ridge(&self.gram, &self.moment, self.config.epsilon)
    }
}

fn solve_ridge(gram: &DMatrix<f64>, moment: &DVector<f64>, epsilon: f64) -> Result<DVector<f64>, AdaptError> {
    if gram.nrows() == 1 {
        let g = gram[(0, 0)] + epsilon;
        if !(g > 0.0) || !(moment[0] / g).is_finite() {
            return Err(AdaptError::SingularGram);
        }
        return Ok(DVector::from_element(1, moment[0] / g));
    }
    let mut a = gram.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += epsilon;
    }
    let chol = a.cholesky().ok_or(AdaptError::SingularGram)?;
    let theta = chol.solve(moment);
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(AdaptError::SingularGram);
    }
    Ok(theta)
}

/// Batch exp-LS estimate after observing every row of the history, with
/// explicit weights `e^{-μ(n-1-s)}`.
pub fn expls_fit(features: &[DVector<f64>], targets: &[f64], config: &ExpLsConfig) -> Result<DVector<f64>, AdaptError> {
    config.validate()?;
    let dim = check_history(features, targets)?;
    let n = features.len();
    let mut gram = DMatrix::zeros(dim, dim);
    let mut moment = DVector::zeros(dim);
    for (s, (f, &y)) in features.iter().zip(targets).enumerate() {
        let age = (n - 1 - s) as f64;
        let w = if age == 0.0 { 1.0 } else { (-config.mu * age).exp() };
        gram.ger(w, f, f, 1.0);
        moment.axpy(w * y, f, 1.0);
    }
    solve_ridge(&gram, &moment, config.epsilon)
}

/// Forgetting factors searched by [`tune_mu`]: `0` and `2^{-k}`, `k = 2..16`.
pub fn mu_grid() -> Vec<f64> {
    std::iter::once(0.0).chain((2..=16).map(|k| 2f64.powi(-k))).collect()
}

/// Picks `μ` from [`mu_grid`] by the RMSE of one-step forecasts on rows
/// `validation_start..`, the estimator having run online from row 0.
/// Ties keep the earlier grid value.
pub fn tune_mu(
    features: &[DVector<f64>],
    targets: &[f64],
    validation_start: usize,
    epsilon: f64,
) -> Result<f64, AdaptError> {
    let dim = check_history(features, targets)?;
    if validation_start >= features.len() {
        return Err(AdaptError::InvalidConfig("validation split is empty".into()));
    }
    let scores: Vec<f64> = mu_grid()
        .into_par_iter()
        .map(|mu| {
            let mut est = match ExpLs::new(dim, ExpLsConfig { mu, epsilon }) {
                Ok(e) => e,
                Err(_) => return f64::INFINITY,
            };
            let mut sse = 0.0;
            for (t, (f, &y)) in features.iter().zip(targets).enumerate() {
                if t >= validation_start {
                    match est.theta() {
                        Ok(theta) => sse += (y - theta.dot(f)).powi(2),
                        Err(_) => return f64::INFINITY,
                    }
                }
                if est.update(f, y).is_err() {
                    return f64::INFINITY;
                }
            }
            sse
        })
        .collect();
    let grid = mu_grid();
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s < scores[best] {
            best = i;
        }
    }
    if !scores[best].is_finite() {
        return Err(AdaptError::SingularGram);
    }
    Ok(grid[best])
}

/// Default validation split: the last 365 rows when the history is longer
/// than that, otherwise the last quarter.
pub fn default_validation_start(n: usize) -> usize {
    if n > 365 {
        n - 365
    } else {
        n - n / 4
    }
}

// ---------------------------------------------------------------------------
// Kalman filter

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub theta_hat: DVector<f64>,
    /// Scaled covariance `P*_t`.
    pub p: DMatrix<f64>,
    pub t: usize,
}

impl KalmanState {
    pub fn new(theta1: DVector<f64>, p1_star: DMatrix<f64>) -> Result<Self, AdaptError> {
        check_len(theta1.len(), p1_star.nrows())?;
        check_len(theta1.len(), p1_star.ncols())?;
        Ok(Self { theta_hat: theta1, p: p1_star, t: 0 })
    }

    pub fn dim(&self) -> usize {
        self.theta_hat.len()
    }

    /// Forecast mean and scaled variance `1 + fᵀP*f`.
    pub fn predict(&self, f: &DVector<f64>) -> (f64, f64) {
        let pf = &self.p * f;
        (self.theta_hat.dot(f), 1.0 + f.dot(&pf))
    }

    /// Measurement update with `(f, y)` followed by `P* += Q*`. Returns the
    /// forecast mean and scaled variance made before the update.
    pub fn step(&mut self, f: &DVector<f64>, y: f64, q_star: &DMatrix<f64>) -> Result<(f64, f64), AdaptError> {
        check_len(self.dim(), f.len())?;
        check_len(self.dim(), q_star.nrows())?;
        if !y.is_finite() || f.iter().any(|v| !v.is_finite()) {
            return Err(AdaptError::NonFiniteInput(self.t));
        }
        let out = self.measure(f, y);
        self.p += q_star;
        Ok(out)
    }

    fn measure(&mut self, f: &DVector<f64>, y: f64) -> (f64, f64) {
        let g = &self.p * f;
        let s = f.dot(&g);
        let v = 1.0 + s;
        let mean = self.theta_hat.dot(f);
        self.theta_hat.axpy((y - mean) / v, &g, 1.0);
        joseph_update(&mut self.p, &g, v);
        self.t += 1;
        (mean, v)
    }

    /// Skips a step without an observation: only `P* += Q*`.
    pub fn advance(&mut self, q_star: &DMatrix<f64>) {
        self.p += q_star;
        self.t += 1;
    }
}

/// `P⁺ = (I − K fᵀ) P (I − K fᵀ)ᵀ + K Kᵀ` with `K = g/v`, `g = Pf`,
/// `v = 1 + fᵀPf`, expanded to `P − K gᵀ − g Kᵀ + v K Kᵀ` and symmetrized.
fn joseph_update(p: &mut DMatrix<f64>, g: &DVector<f64>, v: f64) {
    let n = g.len();
    for i in 0..n {
        let ki = g[i] / v;
        for j in 0..n {
            let kj = g[j] / v;
            p[(i, j)] += -ki * g[j] - g[i] * kj + v * ki * kj;
        }
    }
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = m;
            p[(j, i)] = m;
        }
    }
}

/// One step of the scaled filter; see [`KalmanState::step`].
pub fn kalman_step(
    state: &KalmanState,
    f: &DVector<f64>,
    y: f64,
    q_star: &DMatrix<f64>,
) -> Result<(f64, f64, KalmanState), AdaptError> {
    let mut next = state.clone();
    let (mean, var) = next.step(f, y, q_star)?;
    Ok((mean, var, next))
}

/// Hyperparameters of the scaled filter.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanConfig {
    pub theta1: DVector<f64>,
    pub p1_star: DMatrix<f64>,
    pub q_star: DMatrix<f64>,
    /// Index of the first row of the new regime.
    pub break_time: Option<usize>,
    /// Covariance added before the update at `break_time`; identity if unset.
    pub break_q_star: Option<DMatrix<f64>>,
}

impl KalmanConfig {
    /// `Q* = 0`, `P*₁ = I`.
    pub fn static_filter(theta1: DVector<f64>) -> Self {
        let d = theta1.len();
        Self {
            theta1,
            p1_star: DMatrix::identity(d, d),
            q_star: DMatrix::zeros(d, d),
            break_time: None,
            break_q_star: None,
        }
    }

    /// `Q* = diag(q)`, `P*₁ = I`.
    pub fn dynamic(theta1: DVector<f64>, q_diag: &[f64]) -> Self {
        let mut c = Self::static_filter(theta1);
        c.q_star = DMatrix::from_diagonal(&DVector::from_column_slice(q_diag));
        c
    }

    pub fn with_break(mut self, break_time: usize) -> Self {
        self.break_time = Some(break_time);
        self
    }

    pub fn dim(&self) -> usize {
        self.theta1.len()
    }

    fn validate(&self) -> Result<(), AdaptError> {
        let d = self.dim();
        for m in [Some(&self.p1_star), Some(&self.q_star), self.break_q_star.as_ref()].into_iter().flatten() {
            check_len(d, m.nrows())?;
            check_len(d, m.ncols())?;
            if m.iter().any(|v| !v.is_finite()) || (0..d).any(|i| m[(i, i)] < 0.0) {
                return Err(AdaptError::InvalidConfig("covariance has a negative or non-finite entry".into()));
            }
        }
        Ok(())
    }

    pub fn break_covariance(&self) -> DMatrix<f64> {
        self.break_q_star.clone().unwrap_or_else(|| DMatrix::identity(self.dim(), self.dim()))
    }

    /// State noise added after the update at step `t`. The break covariance
    /// is added after step `break_time − 1`, so the first row of the new
    /// regime is already assimilated with the inflated covariance.
    pub fn q_at(&self, t: usize) -> DMatrix<f64> {
        match self.break_time {
            Some(b) if b >= 1 && t == b - 1 => &self.q_star + self.break_covariance(),
            _ => self.q_star.clone(),
        }
    }

    fn initial_state(&self) -> KalmanState {
        let mut state = KalmanState { theta_hat: self.theta1.clone(), p: self.p1_star.clone(), t: 0 };
        if self.break_time == Some(0) {
            state.p += self.break_covariance();
        }
        state
    }

    pub fn to_json(&self) -> Result<String, AdaptError> {
        Ok(serde_json::to_string_pretty(&KalmanConfigRepr::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self, AdaptError> {
        let repr: KalmanConfigRepr = serde_json::from_str(s)?;
        let c = repr.into_config()?;
        c.validate()?;
        Ok(c)
    }
}

/// JSON form of [`KalmanConfig`]. A diagonal `Q*` whose entries are zero or
/// powers of two is stored as exponents (`null` for zero).
#[derive(Debug, Clone, Serialize, Deserialize)]
struct KalmanConfigRepr {
    theta1: Vec<f64>,
    p1_star: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    q_star_exponents: Option<Vec<Option<i32>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    q_star: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    break_time: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    break_q_star: Option<Vec<Vec<f64>>>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn matrix_of(rows: &[Vec<f64>], d: usize) -> Result<DMatrix<f64>, AdaptError> {
    check_len(d, rows.len())?;
    for r in rows {
        check_len(d, r.len())?;
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

fn exponent_of(v: f64) -> Option<Option<i32>> {
    if v == 0.0 {
        return Some(None);
    }
    let j = v.log2().round() as i32;
    (2f64.powi(j) == v).then_some(Some(j))
}

impl From<&KalmanConfig> for KalmanConfigRepr {
    fn from(c: &KalmanConfig) -> Self {
        let d = c.dim();
        let diagonal = (0..d).all(|i| (0..d).all(|j| i == j || c.q_star[(i, j)] == 0.0));
        let exps: Option<Vec<Option<i32>>> = if diagonal {
            (0..d).map(|i| exponent_of(c.q_star[(i, i)])).collect()
        } else {
            None
        };
        Self {
            theta1: c.theta1.iter().copied().collect(),
            p1_star: rows_of(&c.p1_star),
            q_star: exps.is_none().then(|| rows_of(&c.q_star)),
            q_star_exponents: exps,
            break_time: c.break_time,
            break_q_star: c.break_q_star.as_ref().map(rows_of),
        }
    }
}

impl KalmanConfigRepr {
    fn into_config(self) -> Result<KalmanConfig, AdaptError> {
        let d = self.theta1.len();
        let q_star = match (self.q_star_exponents, self.q_star) {
            (Some(e), None) => {
                check_len(d, e.len())?;
                DMatrix::from_diagonal(&DVector::from_iterator(d, e.iter().map(|x| x.map_or(0.0, |j| 2f64.powi(j)))))
            }
            (None, Some(m)) => matrix_of(&m, d)?,
            (None, None) => DMatrix::zeros(d, d),
            (Some(_), Some(_)) => {
                return Err(AdaptError::InvalidConfig("both q_star and q_star_exponents given".into()))
            }
        };
        Ok(KalmanConfig {
            theta1: DVector::from_vec(self.theta1),
            p1_star: matrix_of(&self.p1_star, d)?,
            q_star,
            break_time: self.break_time,
            break_q_star: self.break_q_star.map(|m| matrix_of(&m, d)).transpose()?,
        })
    }
}

/// Innovations and scaled variances of one filter pass, together with the
/// affine dependence of every forecast on `θ̂₁`.
struct Pass {
    /// `y_t − f_tᵀ b_t`: innovation when `θ̂₁ = 0`.
    r: Vec<f64>,
    /// `A_tᵀ f_t`: sensitivity of the forecast to `θ̂₁`.
    h: Vec<DVector<f64>>,
    v: Vec<f64>,
}

/// Runs the filter on `D + 1` mean trajectories sharing one covariance:
/// the data run from `θ̂₁ = 0`, and one zero-target run per canonical basis
/// vector.
fn affine_pass(config: &KalmanConfig, features: &[DVector<f64>], targets: &[f64]) -> Pass {
    let d = config.dim();
    let n = features.len();
    let mut p = config.initial_state().p;
    // Column 0 holds b_t, column k+1 holds A_t e_k.
    let mut m = DMatrix::<f64>::zeros(d, d + 1);
    for k in 0..d {
        m[(k, k + 1)] = 1.0;
    }
    let q_diag: Option<DVector<f64>> = is_diagonal(&config.q_star).then(|| config.q_star.diagonal());
    let mut out = Pass { r: Vec::with_capacity(n), h: Vec::with_capacity(n), v: Vec::with_capacity(n) };
    let mut pred = DVector::<f64>::zeros(d + 1);
    for (t, (f, &y)) in features.iter().zip(targets).enumerate() {
        let g = &p * f;
        let v = 1.0 + f.dot(&g);
        m.tr_mul_to(f, &mut pred);
        out.r.push(y - pred[0]);
        out.h.push(pred.rows(1, d).into_owned());
        out.v.push(v);
        // M += g (y_vec − fᵀM) / v with y_vec = (y, 0, …, 0).
        pred.neg_mut();
        pred[0] += y;
        m.ger(1.0 / v, &g, &pred, 1.0);
        joseph_update(&mut p, &g, v);
        match (&q_diag, config.break_time) {
            (_, Some(b)) if b >= 1 && t == b - 1 => p += config.q_at(t),
            (Some(q), _) => {
                for i in 0..d {
                    p[(i, i)] += q[i];
                }
            }
            (None, _) => p += &config.q_star,
        }
    }
    out
}

fn is_diagonal(m: &DMatrix<f64>) -> bool {
    (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)] == 0.0))
}

/// Weighted least squares `argmin Σ (r_t − h_tᵀθ)² / v_t`.
fn gls(pass: &Pass, d: usize) -> Result<DVector<f64>, AdaptError> {
    let mut a = DMatrix::<f64>::zeros(d, d);
    let mut b = DVector::<f64>::zeros(d);
    for ((h, &r), &v) in pass.h.iter().zip(&pass.r).zip(&pass.v) {
        a.ger(1.0 / v, h, h, 1.0);
        b.axpy(r / v, h, 1.0);
    }
    let scale = a.diagonal().amax();
    if !(scale > 0.0) {
        return Err(AdaptError::SingularSystem);
    }
    let chol = a.clone().cholesky().ok_or(AdaptError::SingularSystem)?;
    let theta = chol.solve(&b);
    if theta.iter().any(|x| !x.is_finite()) {
        return Err(AdaptError::SingularSystem);
    }
    Ok(theta)
}

/// Variance of the observation noise for the likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseVariance {
    /// Replaced by its maximizer, the mean of `e_t² / v_t`.
    Profiled,
    Known(f64),
}

fn loglik_from(e2_over_v: impl Iterator<Item = f64>, log_v: f64, n: usize, y2_mean: f64, noise: NoiseVariance) -> Result<f64, AdaptError> {
    let n_f = n as f64;
    let sum: f64 = e2_over_v.sum();
    let ll = match noise {
        NoiseVariance::Profiled => {
            let floor = (SIGMA2_FLOOR * y2_mean).max(f64::MIN_POSITIVE);
            let s2 = (sum / n_f).max(floor);
            -0.5 * n_f * (2.0 * std::f64::consts::PI * s2).ln() - 0.5 * log_v - 0.5 * n_f
        }
        NoiseVariance::Known(s2) => {
            -0.5 * n_f * (2.0 * std::f64::consts::PI * s2).ln() - 0.5 * log_v - 0.5 * sum / s2
        }
    };
    if !ll.is_finite() {
        return Err(AdaptError::NonFiniteLikelihood);
    }
    Ok(ll)
}

/// Gaussian log-likelihood of the one-step forecasts of the filter defined
/// by `config`, with predictive variances `σ² (1 + f_tᵀP*_t f_t)`.
pub fn kalman_loglik_with(
    config: &KalmanConfig,
    features: &[DVector<f64>],
    targets: &[f64],
    noise: NoiseVariance,
) -> Result<f64, AdaptError> {
    config.validate()?;
    let dim = check_history(features, targets)?;
    check_len(config.dim(), dim)?;
    let mut state = config.initial_state();
    let mut e2v = Vec::with_capacity(features.len());
    let mut log_v = 0.0;
    for (t, (f, &y)) in features.iter().zip(targets).enumerate() {
        let (mean, v) = state.step(f, y, &config.q_at(t))?;
        e2v.push((y - mean).powi(2) / v);
        log_v += v.ln();
    }
    let y2 = targets.iter().map(|y| y * y).sum::<f64>() / targets.len() as f64;
    loglik_from(e2v.into_iter(), log_v, features.len(), y2, noise)
}

/// Profiled log-likelihood; see [`kalman_loglik_with`].
pub fn kalman_loglik(config: &KalmanConfig, features: &[DVector<f64>], targets: &[f64]) -> Result<f64, AdaptError> {
    kalman_loglik_with(config, features, targets, NoiseVariance::Profiled)
}

/// Likelihood-optimal `θ̂₁` for the given `P*₁`, `Q*` and break schedule
/// of `config` (its own `theta1` is ignored). The forecasts are affine in
/// `θ̂₁` with variances that do not depend on it, so the optimum is a
/// weighted least-squares solution with weights `1/v*_t`.
pub fn solve_theta1_for(config: &KalmanConfig, features: &[DVector<f64>], targets: &[f64]) -> Result<DVector<f64>, AdaptError> {
    config.validate()?;
    let dim = check_history(features, targets)?;
    check_len(config.dim(), dim)?;
    gls(&affine_pass(config, features, targets), dim)
}

/// [`solve_theta1_for`] with `P*₁ = I` and no break.
pub fn solve_theta1(q_star: &DMatrix<f64>, features: &[DVector<f64>], targets: &[f64]) -> Result<DVector<f64>, AdaptError> {
    let d = q_star.nrows();
    let mut config = KalmanConfig::static_filter(DVector::zeros(d));
    config.q_star = q_star.clone();
    solve_theta1_for(&config, features, targets)
}

/// Profiled likelihood at the optimal `θ̂₁`, from a single affine pass.
fn profiled_loglik_at_optimum(config: &KalmanConfig, features: &[DVector<f64>], targets: &[f64], y2_mean: f64) -> Result<f64, AdaptError> {
    let pass = affine_pass(config, features, targets);
    let theta1 = gls(&pass, config.dim())?;
    let e2v = pass.h.iter().zip(&pass.r).zip(&pass.v).map(|((h, r), v)| (r - h.dot(&theta1)).powi(2) / v);
    let log_v = pass.v.iter().map(|v| v.ln()).sum();
    loglik_from(e2v, log_v, features.len(), y2_mean, NoiseVariance::Profiled)
}

/// Outcome of [`greedy_search_q`].
#[derive(Debug, Clone, PartialEq)]
pub struct QSearch {
    /// Exponent per diagonal entry; `None` means zero.
    pub exponents: Vec<Option<i32>>,
    pub loglik: f64,
    pub evaluations: usize,
    pub rounds: usize,
}

impl QSearch {
    pub fn diagonal(&self) -> Vec<f64> {
        self.exponents.iter().map(|e| e.map_or(0.0, |j| 2f64.powi(j))).collect()
    }

    pub fn q_star(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(self.diagonal()))
    }
}

/// Greedy search over diagonal `Q*` with `P*₁ = I` and `θ̂₁` at its
/// likelihood optimum. Starting from `Q* = 0`, each round tries every
/// single-entry change to any value of `{0} ∪ {2^j : -30 ≤ j ≤ 0}` and
/// keeps the best if it increases the profiled likelihood. Ties go to the
/// smaller value, then to the lower coordinate.
pub fn greedy_search_q(features: &[DVector<f64>], targets: &[f64]) -> Result<QSearch, AdaptError> {
    let d = check_history(features, targets)?;
    if features.len() < 10 * d {
        log::warn!("Q* search on {} rows for dimension {d}", features.len());
    }
    let y2 = targets.iter().map(|y| y * y).sum::<f64>() / targets.len() as f64;
    let eval = |exps: &[Option<i32>]| -> f64 {
        let q: Vec<f64> = exps.iter().map(|e| e.map_or(0.0, |j| 2f64.powi(j))).collect();
        let config = KalmanConfig::dynamic(DVector::zeros(d), &q);
        profiled_loglik_at_optimum(&config, features, targets, y2).unwrap_or(f64::NEG_INFINITY)
    };
    let values: Vec<Option<i32>> = std::iter::once(None).chain(Q_EXPONENTS.map(Some)).collect();
    let mut current = vec![None; d];
    let mut best = eval(&current);
    let mut evaluations = 1;
    let mut rounds = 0;
    while rounds < MAX_GREEDY_ROUNDS {
        rounds += 1;
        let candidates: Vec<(usize, Option<i32>)> = values
            .iter()
            .flat_map(|&v| (0..d).map(move |c| (c, v)))
            .filter(|&(c, v)| current[c] != v)
            .collect();
        let scores: Vec<f64> = candidates
            .par_iter()
            .map(|&(c, v)| {
                let mut e = current.clone();
                e[c] = v;
                eval(&e)
            })
            .collect();
        evaluations += candidates.len();
        let threshold = best + 1e-12 * best.abs().max(1.0);
        let mut pick: Option<usize> = None;
        for (i, &s) in scores.iter().enumerate() {
            if s > threshold && pick.is_none_or(|p| s > scores[p]) {
                pick = Some(i);
            }
        }
        match pick {
            Some(i) => {
                let (c, v) = candidates[i];
                current[c] = v;
                best = scores[i];
            }
            None => break,
        }
    }
    if !best.is_finite() {
        return Err(AdaptError::NonFiniteLikelihood);
    }
    Ok(QSearch { exponents: current, loglik: best, evaluations, rounds })
}

// ---------------------------------------------------------------------------
// Online runner

#[derive(Debug, Clone, PartialEq)]
pub enum Adapter {
    Kalman(KalmanConfig),
    ExpLs(ExpLsConfig),
}

/// Forecasts and state trajectory of an adaptive run.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveRun {
    /// `θ̂_tᵀf_t`, made before row `t` is assimilated; NaN when `f_t` is
    /// not finite.
    pub forecasts: Vec<f64>,
    /// Scaled forecast variance (Kalman only; NaN otherwise).
    pub variances: Vec<f64>,
    /// `θ̂_t` in use at row `t`.
    pub thetas: Vec<DVector<f64>>,
    /// Diagonal of `P*_t` at row `t` (Kalman only; empty otherwise).
    pub p_diagonals: Vec<DVector<f64>>,
}

impl AdaptiveRun {
    /// CSV with columns `t, theta_0.., p_0..`.
    pub fn write_trajectory_csv<W: Write>(&self, w: W) -> Result<(), AdaptError> {
        let mut out = csv::Writer::from_writer(w);
        let d = self.thetas.first().map_or(0, |t| t.len());
        let with_p = !self.p_diagonals.is_empty();
        let mut header = vec!["t".to_string()];
        header.extend((0..d).map(|j| format!("theta_{j}")));
        if with_p {
            header.extend((0..d).map(|j| format!("p_{j}")));
        }
        out.write_record(&header)?;
        for (t, theta) in self.thetas.iter().enumerate() {
            let mut rec = vec![t.to_string()];
            rec.extend(theta.iter().map(|v| v.to_string()));
            if with_p {
                rec.extend(self.p_diagonals[t].iter().map(|v| v.to_string()));
            }
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Runs an adapter over precomputed effect vectors. Rows with a non-finite
/// effect vector get a NaN forecast and no update; rows with a missing
/// target are forecast but not assimilated.
pub fn run_adaptive_features(
    features: &[DVector<f64>],
    targets: &[f64],
    adapter: &Adapter,
) -> Result<AdaptiveRun, AdaptError> {
    check_len(features.len(), targets.len())?;
    let n = features.len();
    let mut run = AdaptiveRun {
        forecasts: Vec::with_capacity(n),
        variances: Vec::with_capacity(n),
        thetas: Vec::with_capacity(n),
        p_diagonals: Vec::new(),
    };
    match adapter {
        Adapter::Kalman(config) => {
            config.validate()?;
            let mut state = config.initial_state();
            for (t, (f, &y)) in features.iter().zip(targets).enumerate() {
                check_len(config.dim(), f.len())?;
                run.thetas.push(state.theta_hat.clone());
                run.p_diagonals.push(state.p.diagonal());
                let q = config.q_at(t);
                if f.iter().all(|v| v.is_finite()) {
                    let (mean, var) = state.predict(f);
                    run.forecasts.push(mean);
                    run.variances.push(var);
                    if y.is_finite() {
                        state.step(f, y, &q)?;
                        continue;
                    }
                } else {
                    run.forecasts.push(f64::NAN);
                    run.variances.push(f64::NAN);
                }
                state.advance(&q);
            }
        }
        Adapter::ExpLs(config) => {
            let dim = features.first().map_or(0, |f| f.len());
            let mut est = ExpLs::new(dim, *config)?;
            let mut theta = DVector::zeros(dim);
            for (f, &y) in features.iter().zip(targets) {
                check_len(dim, f.len())?;
                run.thetas.push(theta.clone());
                run.variances.push(f64::NAN);
                if f.iter().all(|v| v.is_finite()) {
                    run.forecasts.push(theta.dot(f));
                    if y.is_finite() {
                        est.update(f, y)?;
                        theta = est.theta()?;
                    }
                } else {
                    run.forecasts.push(f64::NAN);
                }
            }
        }
    }
    Ok(run)
}

/// Effect vectors of every row of `rows`. Rows with a missing covariate,
/// such as an undefined lag, get a non-finite vector.
pub fn effect_rows(model: &FittedGam, rows: &TimeTable) -> Result<Vec<DVector<f64>>, AdaptError> {
    Ok(model.effect_values(rows)?)
}

/// Runs an adapter over a stream of feature rows of a fitted model. The
/// forecast at row `t` only uses rows before `t`.
pub fn run_adaptive(model: &FittedGam, stream: &TimeTable, adapter: &Adapter) -> Result<AdaptiveRun, AdaptError> {
    let features = effect_rows(model, stream)?;
    let targets = stream.column(col::LOAD)?;
    run_adaptive_features(&features, targets, adapter)
}
