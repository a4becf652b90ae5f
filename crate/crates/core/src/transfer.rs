//! Fine-tuning of the full coefficient vector by batch gradient descent,
//! and transfer of a fine-tuned shift from a source series (GAM-δ).
//!
//! The loss on rows `s < t` is `ℒ(β) = Σ (y_s − βᵀB(x_s))²`, kept in
//! Gram form `βᵀGβ − 2bᵀβ + c` so that rolling fine-tuning costs
//! `O(K p²)` per step.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gam::{term, FittedGam, GamError, TermLayout};
use crate::table::TimeTable;

pub const DEFAULT_ITERATIONS: usize = 75;
pub const DEFAULT_STEP_DIVISOR: f64 = 5.0;
/// Relative window growth that triggers a new step size.
pub const STEP_REFRESH_GROWTH: f64 = 0.10;

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("Gram matrix is zero")]
    ZeroGram,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("denominator of the scale ratio is not positive")]
    ZeroDenominator,
    #[error("term `{0}` cannot be mapped between the models")]
    UnmappedRequiredTerm(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Gam(#[from] GamError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn check_len(expected: usize, got: usize) -> Result<(), TransferError> {
    if expected != got {
        return Err(TransferError::DimensionMismatch { expected, got });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    /// Gradient iterations per step.
    #[serde(default = "default_iterations")]
    pub k: usize,
    /// `α = α* / step_divisor`.
    #[serde(default = "default_divisor")]
    pub step_divisor: f64,
    /// Coefficient indices left untouched.
    #[serde(default)]
    pub frozen: Vec<usize>,
}

fn default_iterations() -> usize {
    DEFAULT_ITERATIONS
}

fn default_divisor() -> f64 {
    DEFAULT_STEP_DIVISOR
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { k: DEFAULT_ITERATIONS, step_divisor: DEFAULT_STEP_DIVISOR, frozen: Vec::new() }
    }
}

impl FinetuneConfig {
    fn validate(&self, p: usize) -> Result<(), TransferError> {
        if !(self.step_divisor > 0.0) {
            return Err(TransferError::InvalidConfig(format!("step divisor {}", self.step_divisor)));
        }
        if let Some(&i) = self.frozen.iter().find(|&&i| i >= p) {
            return Err(TransferError::InvalidConfig(format!("frozen index {i} out of range for {p} coefficients")));
        }
        Ok(())
    }
}

/// Coefficient indices of the named terms of `model`.
pub fn term_columns(model: &FittedGam, names: &[&str]) -> Vec<usize> {
    model
        .terms
        .iter()
        .filter(|t| names.contains(&t.name.as_str()))
        .flat_map(|t| t.columns())
        .collect()
}

/// `α*/divisor` with `α* = 2/(λ_max + λ_min)` of `gram`.
pub fn step_size_from_gram(gram: &DMatrix<f64>, divisor: f64) -> Result<f64, TransferError> {
    let eig = gram.clone().symmetric_eigenvalues();
    let max = eig.max();
    let min = eig.min().max(0.0);
    if !(max > 0.0) {
        return Err(TransferError::ZeroGram);
    }
    Ok(2.0 / (max + min) / divisor)
}

/// `α = α*/5` for the Gram matrix `XᵀX` of `design`.
pub fn compute_step_size(design: &DMatrix<f64>) -> Result<f64, TransferError> {
    if design.nrows() == 0 || design.ncols() == 0 {
        return Err(TransferError::ZeroGram);
    }
    step_size_from_gram(&design.tr_mul(design), DEFAULT_STEP_DIVISOR)
}

/// `ℒ(β) = Σ (y_s − βᵀx_s)²`.
pub fn loss(design: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> f64 {
    (y - design * beta).norm_squared()
}

/// `∇ℒ(β) = −2Xᵀ(y − Xβ)`.
pub fn gradient(design: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> DVector<f64> {
    design.tr_mul(&(y - design * beta)) * -2.0
}

/// Sufficient statistics of the loss: `G = XᵀX`, `b = Xᵀy`, `c = yᵀy`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramWindow {
    pub gram: DMatrix<f64>,
    pub xty: DVector<f64>,
    pub yty: f64,
    pub rows: usize,
    alpha: Option<(f64, usize)>,
}

impl GramWindow {
    pub fn new(p: usize) -> Self {
        Self { gram: DMatrix::zeros(p, p), xty: DVector::zeros(p), yty: 0.0, rows: 0, alpha: None }
    }

    pub fn from_design(design: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self, TransferError> {
        check_len(design.nrows(), y.len())?;
        Ok(Self {
            gram: design.tr_mul(design),
            xty: design.tr_mul(y),
            yty: y.norm_squared(),
            rows: design.nrows(),
            alpha: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.xty.len()
    }

    pub fn push(&mut self, x: &DVector<f64>, y: f64) -> Result<(), TransferError> {
        check_len(self.dim(), x.len())?;
        self.gram.ger(1.0, x, x, 1.0);
        self.xty.axpy(y, x, 1.0);
        self.yty += y * y;
        self.rows += 1;
        Ok(())
    }

    pub fn loss(&self, beta: &DVector<f64>) -> f64 {
        beta.dot(&(&self.gram * beta)) - 2.0 * self.xty.dot(beta) + self.yty
    }

    pub fn gradient(&self, beta: &DVector<f64>) -> DVector<f64> {
        (&self.gram * beta - &self.xty) * 2.0
    }

    /// Step size for the current window; recomputed only when the window has
    /// grown by at least 10% since the last computation.
    pub fn step_size(&mut self, divisor: f64) -> Result<f64, TransferError> {
        match self.alpha {
            Some((a, n)) if (self.rows as f64) < (n as f64) * (1.0 + STEP_REFRESH_GROWTH) => Ok(a),
            _ => {
                let a = step_size_from_gram(&self.gram, divisor)?;
                self.alpha = Some((a, self.rows));
                Ok(a)
            }
        }
    }

    /// `K` gradient steps from `start` with step `alpha`; frozen
    /// coordinates are never written.
    pub fn descend(&self, start: &DVector<f64>, alpha: f64, k: usize, frozen: &[usize]) -> Result<DVector<f64>, TransferError> {
        check_len(self.dim(), start.len())?;
        let mut beta = start.clone();
        if self.rows == 0 {
            return Ok(beta);
        }
        let frozen: BTreeSet<usize> = frozen.iter().copied().collect();
        let mut g = DVector::zeros(self.dim());
        for _ in 0..k {
            self.gram.mul_to(&beta, &mut g);
            g -= &self.xty;
            for i in 0..beta.len() {
                if !frozen.contains(&i) {
                    beta[i] -= alpha * 2.0 * g[i];
                }
            }
        }
        Ok(beta)
    }

    /// Fine-tunes `start` on the window with the configured step rule.
    pub fn finetune(&mut self, start: &DVector<f64>, config: &FinetuneConfig) -> Result<DVector<f64>, TransferError> {
        config.validate(self.dim())?;
        if self.rows == 0 || config.k == 0 {
            check_len(self.dim(), start.len())?;
            return Ok(start.clone());
        }
        let alpha = self.step_size(config.step_divisor)?;
        self.descend(start, alpha, config.k, &config.frozen)
    }
}

/// `K` full-batch gradient steps from `beta_source` on `(design, y)`.
pub fn finetune(
    beta_source: &DVector<f64>,
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    config: &FinetuneConfig,
) -> Result<DVector<f64>, TransferError> {
    check_len(beta_source.len(), design.ncols())?;
    GramWindow::from_design(design, y)?.finetune(beta_source, config)
}

/// [`finetune`] with an explicit step size.
pub fn finetune_with_step(
    beta_source: &DVector<f64>,
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    alpha: f64,
    k: usize,
    frozen: &[usize],
) -> Result<DVector<f64>, TransferError> {
    check_len(beta_source.len(), design.ncols())?;
    GramWindow::from_design(design, y)?.descend(beta_source, alpha, k, frozen)
}

/// `ρ̂ = Σ y_target / Σ y_source` over aligned windows.
pub fn estimate_rho(y_target: &[f64], y_source: &[f64]) -> Result<f64, TransferError> {
    check_len(y_target.len(), y_source.len())?;
    let den: f64 = y_source.iter().sum();
    if !(den > 0.0) {
        return Err(TransferError::ZeroDenominator);
    }
    Ok(y_target.iter().sum::<f64>() / den)
}

/// Map from source coefficients to target coefficients plus the scale and
/// the current source shift `δ̂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferLink {
    pub rho: f64,
    /// `(source index, target index)` pairs.
    pub coordinate_map: Vec<(usize, usize)>,
    /// Target terms that never receive a shift.
    pub frozen_terms: Vec<String>,
    pub target_len: usize,
    /// Shift in source coordinates.
    pub delta: Vec<f64>,
    /// Target indices of slopes on lagged loads. These are dimensionless,
    /// so their shift is copied without the `ρ` factor.
    #[serde(default)]
    pub unscaled: Vec<usize>,
}

fn is_load_slope(layout: &TermLayout) -> bool {
    match layout {
        TermLayout::FactorSlopes { covariate, .. } | TermLayout::Linear { covariate } => covariate.starts_with("load"),
        _ => false,
    }
}

fn factor_levels(layout: &TermLayout) -> Option<Vec<Vec<f64>>> {
    match layout {
        TermLayout::FactorIntercepts { levels, .. } => Some(levels[1..].to_vec()),
        TermLayout::FactorSlopes { levels, .. } => Some(levels.iter().map(|l| vec![*l]).collect()),
        _ => None,
    }
}

impl TransferLink {
    /// Matches coefficients by term name: factor terms by level, other
    /// terms by position when the widths agree. The intercept always maps.
    /// Terms in `excluded` stay unmapped; terms in `required` must map.
    pub fn build(
        source: &FittedGam,
        target: &FittedGam,
        rho: f64,
        excluded: &[&str],
        required: &[&str],
    ) -> Result<Self, TransferError> {
        let mut map = vec![(0, 0)];
        let mut mapped_terms = Vec::new();
        let mut unscaled = Vec::new();
        for t in &target.terms {
            if is_load_slope(&t.layout) {
                unscaled.extend(t.start..t.start + t.len);
            }
            if excluded.contains(&t.name.as_str()) {
                continue;
            }
            let Some(s) = source.term(&t.name) else { continue };
            match (factor_levels(&s.layout), factor_levels(&t.layout)) {
                (Some(sl), Some(tl)) => {
                    let mut any = false;
                    for (ti, lvl) in tl.iter().enumerate() {
                        if let Some(si) = sl.iter().position(|l| l == lvl) {
                            map.push((s.start + si, t.start + ti));
                            any = true;
                        }
                    }
                    if any {
                        mapped_terms.push(t.name.clone());
                    }
                }
                (None, None) if s.len == t.len => {
                    map.extend((0..t.len).map(|k| (s.start + k, t.start + k)));
                    mapped_terms.push(t.name.clone());
                }
                _ => {}
            }
        }
        for r in required {
            if !mapped_terms.iter().any(|m| m == r) {
                return Err(TransferError::UnmappedRequiredTerm((*r).to_string()));
            }
        }
        Ok(Self {
            rho,
            coordinate_map: map,
            frozen_terms: excluded.iter().map(|s| s.to_string()).collect(),
            target_len: target.n_coefficients(),
            delta: vec![0.0; source.n_coefficients()],
            unscaled,
        })
    }

    /// [`build`](Self::build) with the time-of-year smooth excluded and no
    /// required terms.
    pub fn standard(source: &FittedGam, target: &FittedGam, rho: f64) -> Result<Self, TransferError> {
        Self::build(source, target, rho, &[term::TOY], &[])
    }

    /// `ρ · map(δ̂)` in target coordinates, with lag slopes copied
    /// unscaled; unmapped entries are zero.
    pub fn mapped_delta(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.target_len);
        for &(s, t) in &self.coordinate_map {
            let scale = if self.unscaled.contains(&t) { 1.0 } else { self.rho };
            out[t] = scale * self.delta[s];
        }
        out
    }

    /// `β̃ = β_fr + ρ · map(δ̂)`.
    pub fn transferred(&self, beta_fr: &DVector<f64>) -> Result<DVector<f64>, TransferError> {
        check_len(self.target_len, beta_fr.len())?;
        Ok(beta_fr + self.mapped_delta())
    }

    pub fn set_delta(&mut self, delta: &DVector<f64>) -> Result<(), TransferError> {
        check_len(self.delta.len(), delta.len())?;
        self.delta = delta.iter().copied().collect();
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, TransferError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, TransferError> {
        let link: Self = serde_json::from_str(s)?;
        if link.coordinate_map.iter().any(|&(s, t)| s >= link.delta.len() || t >= link.target_len)
            || link.unscaled.iter().any(|&t| t >= link.target_len)
        {
            return Err(TransferError::InvalidConfig("coordinate map out of range".into()));
        }
        Ok(link)
    }
}

/// `δ̂ = finetune(β_S) − β_S` on the source rows.
pub fn source_delta(source: &FittedGam, window: &mut GramWindow, config: &FinetuneConfig) -> Result<DVector<f64>, TransferError> {
    let beta = DVector::from_column_slice(&source.coefficients);
    Ok(window.finetune(&beta, config)? - beta)
}

/// GAM-δ forecasts for `rows` with `β̃ = β_fr + ρ δ̂`.
pub fn gam_delta_forecast(
    beta_fr: &DVector<f64>,
    target_model: &FittedGam,
    link: &TransferLink,
    rows: &TimeTable,
) -> Result<Vec<f64>, TransferError> {
    let beta = link.transferred(beta_fr)?;
    Ok(target_model.predict_with(beta.as_slice(), rows)?)
}

/// GAM-δ followed by fine-tuning on the target window.
pub fn gam_delta_finetuned(
    beta_fr: &DVector<f64>,
    target_model: &FittedGam,
    link: &TransferLink,
    target_window: &mut GramWindow,
    config: &FinetuneConfig,
    rows: &TimeTable,
) -> Result<Vec<f64>, TransferError> {
    let start = link.transferred(beta_fr)?;
    let beta = target_window.finetune(&start, config)?;
    Ok(target_model.predict_with(beta.as_slice(), rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gam::{fit_penalized, GamSpec, Lambda, ParametricTerm, SmoothTerm};
    use crate::table::col;
    use indexmap::IndexMap;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_problem(seed: u64, n: usize, p: usize) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal));
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal) * 3.0);
        (x, y)
    }

    #[test]
    fn step_size_examples() {
        let g = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        assert!((step_size_from_gram(&g, 5.0).unwrap() - 0.08).abs() < 1e-15);
        assert!((compute_step_size(&DMatrix::identity(3, 3)).unwrap() - 0.2).abs() < 1e-15);
        let (x, _) = random_problem(1, 30, 4);
        let a = compute_step_size(&x).unwrap();
        let b = compute_step_size(&(&x * 3.0)).unwrap();
        assert!((b - a / 9.0).abs() < 1e-12 * a);
        assert!(matches!(compute_step_size(&DMatrix::zeros(3, 2)), Err(TransferError::ZeroGram)));
    }

    #[test]
    fn finetune_examples() {
        let x = DMatrix::from_element(1, 1, 1.0);
        let y = DVector::from_element(1, 1.0);
        let b0 = DVector::zeros(1);
        assert_eq!(finetune(&b0, &x, &y, &FinetuneConfig { k: 0, ..Default::default() }).unwrap(), b0);
        let b = finetune_with_step(&b0, &x, &y, 0.1, 1, &[]).unwrap();
        assert!((b[0] - 0.2).abs() < 1e-15);
        assert!((gradient(&x, &y, &b0)[0] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (x, y) = random_problem(2, 40, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let beta = DVector::from_fn(6, |_, _| rng.sample::<f64, _>(StandardNormal));
            let g = gradient(&x, &y, &beta);
            let h = 1e-5;
            let fd = DVector::from_fn(6, |i, _| {
                let mut p = beta.clone();
                let mut m = beta.clone();
                p[i] += h;
                m[i] -= h;
                (loss(&x, &y, &p) - loss(&x, &y, &m)) / (2.0 * h)
            });
            assert!((&g - &fd).norm() <= 1e-5 * g.norm());
        }
    }

    #[test]
    fn gram_window_matches_design_form() {
        let (x, y) = random_problem(3, 25, 5);
        let mut w = GramWindow::new(5);
        for i in 0..25 {
            w.push(&x.row(i).transpose(), y[i]).unwrap();
        }
        let beta = DVector::from_fn(5, |i, _| i as f64 - 2.0);
        assert!((w.loss(&beta) - loss(&x, &y, &beta)).abs() < 1e-9 * loss(&x, &y, &beta));
        assert!((w.gradient(&beta) - gradient(&x, &y, &beta)).norm() < 1e-9 * gradient(&x, &y, &beta).norm());
    }

    #[test]
    fn step_size_refreshes_on_growth() {
        let (x, y) = random_problem(4, 40, 3);
        let mut w = GramWindow::new(3);
        for i in 0..20 {
            w.push(&x.row(i).transpose(), y[i]).unwrap();
        }
        let a = w.step_size(5.0).unwrap();
        w.push(&x.row(20).transpose(), y[20]).unwrap();
        assert_eq!(w.step_size(5.0).unwrap(), a);
        w.push(&x.row(21).transpose(), y[21]).unwrap();
        assert_ne!(w.step_size(5.0).unwrap(), a);
    }

    #[test]
    fn monotone_descent_and_convergence_with_frozen_coordinates() {
        let (x, y) = random_problem(5, 200, 20);
        let frozen = vec![3, 11, 17];
        let start = DVector::from_fn(20, |i, _| (i as f64).sin());
        let alpha = compute_step_size(&x).unwrap();
        let mut beta = start.clone();
        let mut prev = loss(&x, &y, &beta);
        for _ in 0..200 {
            beta = finetune_with_step(&beta, &x, &y, alpha, 1, &frozen).unwrap();
            let l = loss(&x, &y, &beta);
            let g = gradient(&x, &y, &beta);
            let free_grad2 = (0..20).filter(|i| !frozen.contains(i)).map(|i| g[i] * g[i]).sum::<f64>();
            assert!(l <= prev * (1.0 + 1e-14));
            // Strict while the expected decrease is above rounding.
            if alpha * free_grad2 > 1e-10 * prev {
                assert!(l < prev);
            }
            prev = l;
        }
        let cfg = FinetuneConfig { k: 10_000, step_divisor: 5.0, frozen: frozen.clone() };
        let beta = finetune(&start, &x, &y, &cfg).unwrap();
        for &i in &frozen {
            assert_eq!(beta[i].to_bits(), start[i].to_bits());
        }
        // Least squares over the free coordinates, frozen ones held at start.
        let free: Vec<usize> = (0..20).filter(|i| !frozen.contains(i)).collect();
        let xf = DMatrix::from_fn(200, free.len(), |r, c| x[(r, free[c])]);
        let mut resid = y.clone();
        for &i in &frozen {
            resid -= x.column(i) * start[i];
        }
        let oracle = (xf.transpose() * &xf).lu().solve(&(xf.transpose() * resid)).unwrap();
        for (c, &i) in free.iter().enumerate() {
            assert!((beta[i] - oracle[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn rho_examples() {
        assert_eq!(estimate_rho(&[2.0, 4.0], &[1.0, 1.0]).unwrap(), 3.0);
        assert_eq!(estimate_rho(&[5.0, 7.0], &[5.0, 7.0]).unwrap(), 1.0);
        let src = [1.5, 2.25, 3.0];
        let tgt: Vec<f64> = src.iter().map(|v| v * 4.0).collect();
        assert_eq!(estimate_rho(&tgt, &src).unwrap(), 4.0);
        assert!(matches!(estimate_rho(&[1.0], &[0.0]), Err(TransferError::ZeroDenominator)));
    }

    fn simple_spec() -> GamSpec {
        GamSpec {
            parametric_terms: vec![ParametricTerm::FactorIntercepts { name: "dow".into(), factors: vec![col::DAY_TYPE.into()] }],
            smooth_terms: vec![SmoothTerm::univariate("s_temp", col::TEMP, 6), SmoothTerm::univariate(term::TOY, col::TOY, 6)],
            penalty_order: 2,
        }
    }

    fn simple_data(seed: u64, scale: f64) -> TimeTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 300;
        let mut cols: IndexMap<String, Vec<f64>> = IndexMap::new();
        for i in 0..n {
            let day = (i % 7 + 1) as f64;
            let toy = (i % 365) as f64 / 364.0;
            let temp: f64 = rng.random_range(-5.0..30.0);
            let y = scale * (100.0 + 3.0 * day + (temp - 15.0).powi(2) * 0.2 + 10.0 * (6.0 * toy).sin() + rng.sample::<f64, _>(StandardNormal));
            cols.entry(col::DAY_TYPE.into()).or_default().push(day);
            cols.entry(col::TOY.into()).or_default().push(toy);
            cols.entry(col::TEMP.into()).or_default().push(temp);
            cols.entry(col::LOAD.into()).or_default().push(y);
        }
        let start = chrono::DateTime::from_timestamp(0, 0).unwrap();
        let ts = (0..n).map(|i| start + chrono::Duration::days(i as i64)).collect();
        TimeTable::from_parts_unchecked(ts, cols, 1440)
    }

    #[test]
    fn link_maps_by_term_and_level() {
        let data = simple_data(1, 1.0);
        let m = fit_penalized(&simple_spec(), &data, &Lambda::Fixed(vec![1.0, 1.0])).unwrap();
        let link = TransferLink::standard(&m, &m, 1.0).unwrap();
        let toy = m.term(term::TOY).unwrap().columns();
        assert!(link.coordinate_map.iter().all(|&(s, t)| s == t && !toy.contains(&t)));
        assert_eq!(link.coordinate_map.len(), m.n_coefficients() - toy.len());
        assert!(matches!(
            TransferLink::build(&m, &m, 1.0, &[term::TOY], &[term::TOY]),
            Err(TransferError::UnmappedRequiredTerm(_))
        ));
        let back = TransferLink::from_json(&link.to_json().unwrap()).unwrap();
        assert_eq!(back, link);
    }

    #[test]
    fn delta_identities() {
        let data = simple_data(2, 1.0);
        let m = fit_penalized(&simple_spec(), &data, &Lambda::Fixed(vec![1.0, 1.0])).unwrap();
        let beta = DVector::from_column_slice(&m.coefficients);
        let mut link = TransferLink::standard(&m, &m, 1.0).unwrap();
        assert_eq!(gam_delta_forecast(&beta, &m, &link, &data).unwrap(), m.predict(&data).unwrap());
        let mut e1 = DVector::zeros(m.n_coefficients());
        e1[0] = 1.0;
        link.set_delta(&e1).unwrap();
        let b = DVector::from_fn(m.n_coefficients(), |i, _| if i == 0 { 2.0 } else { 3.0 });
        let t = link.transferred(&b).unwrap();
        assert_eq!(t[0], 3.0);
        assert!(t.iter().skip(1).all(|&v| v == 3.0));

        // Empty target window: GAM-δ fine-tuned equals GAM-δ.
        let mut empty = GramWindow::new(m.n_coefficients());
        let cfg = FinetuneConfig::default();
        assert_eq!(
            gam_delta_finetuned(&beta, &m, &link, &mut empty, &cfg, &data).unwrap(),
            gam_delta_forecast(&beta, &m, &link, &data).unwrap()
        );
        // Zero shift: GAM-δ fine-tuned equals plain fine-tuning.
        link.set_delta(&DVector::zeros(m.n_coefficients())).unwrap();
        let x = m.design(&data.slice(0..30)).unwrap();
        let y = DVector::from_column_slice(&data.column(col::LOAD).unwrap()[..30]);
        let mut w = GramWindow::from_design(&x, &y).unwrap();
        let plain = finetune(&beta, &x, &y, &cfg).unwrap();
        assert_eq!(
            gam_delta_finetuned(&beta, &m, &link, &mut w, &cfg, &data).unwrap(),
            m.predict_with(plain.as_slice(), &data).unwrap()
        );
    }

    #[test]
    fn lag_slopes_are_copied_without_rho() {
        let mut spec = simple_spec();
        spec.parametric_terms.push(ParametricTerm::Linear { name: "lag".into(), covariate: col::LOAD1D.into() });
        let mut data = simple_data(5, 1.0);
        let load = data.column(col::LOAD).unwrap().to_vec();
        let lag: Vec<f64> = (0..load.len()).map(|i| load[i.saturating_sub(1)]).collect();
        data.set_column(col::LOAD1D, lag).unwrap();
        let m = fit_penalized(&spec, &data, &Lambda::Fixed(vec![1.0, 1.0])).unwrap();
        let mut link = TransferLink::standard(&m, &m, 3.0).unwrap();
        let slope = m.term("lag").unwrap().start;
        assert_eq!(link.unscaled, vec![slope]);
        link.set_delta(&DVector::from_element(m.n_coefficients(), 1.0)).unwrap();
        let d = link.mapped_delta();
        assert_eq!(d[slope], 1.0);
        assert_eq!(d[0], 3.0);
        assert_eq!(TransferLink::from_json(&link.to_json().unwrap()).unwrap(), link);
    }

    #[test]
    fn transferred_coefficients_are_scale_equivariant() {
        // The design carries no load-valued covariates, so rescaling the
        // source loads rescales the fitted source coefficients and δ̂.
        let target = fit_penalized(&simple_spec(), &simple_data(3, 1.0), &Lambda::Fixed(vec![1.0, 1.0])).unwrap();
        let beta_fr = DVector::from_column_slice(&target.coefficients);
        let c = 7.5;
        let run = |scale: f64, rho: f64| {
            let data = simple_data(4, scale);
            let src = fit_penalized(&simple_spec(), &data, &Lambda::Fixed(vec![1.0, 1.0])).unwrap();
            let recent = data.slice(250..300);
            let mut shifted = recent.clone();
            let y: Vec<f64> = recent.column(col::LOAD).unwrap().iter().map(|v| v * 0.8).collect();
            shifted.set_column(col::LOAD, y.clone()).unwrap();
            let x = src.design(&shifted).unwrap();
            let mut w = GramWindow::from_design(&x, &DVector::from_vec(y)).unwrap();
            let delta = source_delta(&src, &mut w, &FinetuneConfig::default()).unwrap();
            let mut link = TransferLink::standard(&src, &target, rho).unwrap();
            link.set_delta(&delta).unwrap();
            link.transferred(&beta_fr).unwrap()
        };
        let a = run(1.0, 2.0);
        let b = run(c, 2.0 / c);
        assert!((&a - &b).norm() <= 1e-9 * a.norm());
    }
}
