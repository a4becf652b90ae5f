//! Penalized-regression additive models with B-spline smooths.
//!
//! A [`GamSpec`] lists parametric terms (factor intercepts, factor-by-slope
//! blocks, plain linear slopes) and smooth terms (univariate B-splines or
//! tensor products of two). Fitting minimizes
//! `‖y − Xβ‖² + Σ_j λ_j βᵀ S_j β` with each smooth centered over the
//! training rows. Each term is one *effect*; the fitted model also keeps the
//! training mean and standard deviation of every effect so the frozen,
//! normalized effect vector `(1, f̄₁, …, f̄_d)` can drive online adaptation.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spline::{tensor_penalty, tensor_row, SplineBasis, SplineError};
use crate::table::{col, TableError, TimeTable};

pub const FORMAT_VERSION: u32 = 1;

/// Smoothing-parameter grid used by GCV: `10^-4 … 10^4`, one point per decade.
pub const LAMBDA_GRID_EXPONENTS: Range<i32> = -4..5;

/// Effects whose training standard deviation falls below this cannot be
/// normalized.
pub const MIN_EFFECT_SD: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum GamError {
    #[error("design matrix is rank deficient (eigenvalue ratio {0:e})")]
    RankDeficientDesign(f64),
    #[error("no usable rows to fit on")]
    NoUsableRows,
    #[error("effect `{0}` has (near) zero standard deviation on the training set")]
    DegenerateEffect(String),
    #[error("expected {expected} smoothing parameters, got {got}")]
    LambdaCount { expected: usize, got: usize },
    #[error("smooth `{term}`: {source}")]
    Basis {
        term: String,
        #[source]
        source: SplineError,
    },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("coefficient vector has length {got}, design has {expected} columns")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParametricTerm {
    /// One intercept per observed combination of the factor columns, the
    /// first level absorbed into the global intercept.
    FactorIntercepts { name: String, factors: Vec<String> },
    /// One slope on `covariate` per level of `factor`.
    FactorSlopes {
        name: String,
        factor: String,
        covariate: String,
    },
    Linear { name: String, covariate: String },
}

impl ParametricTerm {
    pub fn name(&self) -> &str {
        match self {
            Self::FactorIntercepts { name, .. }
            | Self::FactorSlopes { name, .. }
            | Self::Linear { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothTerm {
    pub name: String,
    /// One covariate for a univariate smooth, two for a tensor product.
    pub covariates: Vec<String>,
    /// Marginal basis dimension per covariate.
    pub basis_dim: Vec<usize>,
}

impl SmoothTerm {
    pub fn univariate(name: &str, covariate: &str, dim: usize) -> Self {
        Self {
            name: name.into(),
            covariates: vec![covariate.into()],
            basis_dim: vec![dim],
        }
    }

    pub fn tensor(name: &str, a: &str, b: &str, dim_a: usize, dim_b: usize) -> Self {
        Self {
            name: name.into(),
            covariates: vec![a.into(), b.into()],
            basis_dim: vec![dim_a, dim_b],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GamSpec {
    pub parametric_terms: Vec<ParametricTerm>,
    pub smooth_terms: Vec<SmoothTerm>,
    pub penalty_order: usize,
}

pub mod term {
    pub const DAYTYPE_DLS: &str = "daytype_dls";
    pub const LOAD1D_BY_DAYTYPE: &str = "load1d_by_daytype";
    pub const LOAD1W: &str = "load1w";
    pub const TIME: &str = "s_time";
    pub const TOY: &str = "s_toy";
    pub const TIME_TEMP: &str = "s_time_temp";
    pub const TEMP95: &str = "s_temp95";
    pub const TEMP99: &str = "s_temp99";
    pub const TEMP_MIN_MAX: &str = "s_tempmin99_tempmax99";
}

impl GamSpec {
    /// The per-instant load model: day-type × DLS intercepts, day-type
    /// specific one-day-lag slopes, a one-week-lag slope, and six smooths
    /// (time, time of year, time × temperature, two smoothed temperatures,
    /// smoothed daily min × max temperature).
    pub fn load_model() -> Self {
        Self {
            parametric_terms: vec![
                ParametricTerm::FactorIntercepts {
                    name: term::DAYTYPE_DLS.into(),
                    factors: vec![col::DAY_TYPE.into(), col::DLS.into()],
                },
                ParametricTerm::FactorSlopes {
                    name: term::LOAD1D_BY_DAYTYPE.into(),
                    factor: col::DAY_TYPE.into(),
                    covariate: col::LOAD1D.into(),
                },
                ParametricTerm::Linear {
                    name: term::LOAD1W.into(),
                    covariate: col::LOAD1W.into(),
                },
            ],
            smooth_terms: vec![
                SmoothTerm::univariate(term::TIME, col::TIME, 10),
                SmoothTerm::univariate(term::TOY, col::TOY, 10),
                SmoothTerm::tensor(term::TIME_TEMP, col::TIME, col::TEMP, 5, 5),
                SmoothTerm::univariate(term::TEMP95, col::TEMP95, 10),
                SmoothTerm::univariate(term::TEMP99, col::TEMP99, 10),
                SmoothTerm::tensor(term::TEMP_MIN_MAX, col::TEMPMIN99, col::TEMPMAX99, 5, 5),
            ],
            penalty_order: 2,
        }
    }

    pub fn effect_count(&self) -> usize {
        self.parametric_terms.len() + self.smooth_terms.len()
    }

    fn validate(&self) -> Result<(), GamError> {
        if self.penalty_order != 2 {
            return Err(GamError::InvalidSpec("only second-order penalties are supported".into()));
        }
        for s in &self.smooth_terms {
            if s.covariates.is_empty() || s.covariates.len() > 2 || s.covariates.len() != s.basis_dim.len() {
                return Err(GamError::InvalidSpec(format!(
                    "smooth `{}` needs one or two covariates with matching basis dimensions",
                    s.name
                )));
            }
            if s.basis_dim.iter().any(|&m| m < 4) {
                return Err(GamError::InvalidSpec(format!("smooth `{}` has basis dimension below 4", s.name)));
            }
        }
        let mut names: Vec<&str> = self
            .parametric_terms
            .iter()
            .map(ParametricTerm::name)
            .chain(self.smooth_terms.iter().map(|s| s.name.as_str()))
            .collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(GamError::InvalidSpec("duplicate term names".into()));
        }
        Ok(())
    }
}

/// Smoothing parameters: fixed per smooth, or selected by GCV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lambda {
    Auto,
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TermLayout {
    FactorIntercepts { factors: Vec<String>, levels: Vec<Vec<f64>> },
    FactorSlopes { factor: String, covariate: String, levels: Vec<f64> },
    Linear { covariate: String },
    Smooth {
        covariates: Vec<String>,
        bases: Vec<SplineBasis>,
        /// Per marginal of a tensor product: training column sums when that
        /// marginal's constant direction is removed, so the tensor does not
        /// duplicate a univariate smooth of the other covariate.
        #[serde(default)]
        marginal_constraints: Vec<Option<Vec<f64>>>,
        /// Column sums of the (marginal-constrained) basis over the training
        /// rows; the coefficients live in its orthogonal complement.
        constraint: Vec<f64>,
        /// Multiplier applied to the raw penalty so that λ is dimensionless.
        penalty_scale: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedTerm {
    pub name: String,
    pub start: usize,
    pub len: usize,
    pub layout: TermLayout,
}

impl FittedTerm {
    pub fn columns(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectNorm {
    pub mean: f64,
    pub sd: f64,
}

/// Row-major design matrix kept with a model for fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignCache {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedGam {
    pub format_version: u32,
    pub spec: GamSpec,
    /// Column 0 is the intercept; term columns follow in spec order,
    /// parametric terms first.
    pub terms: Vec<FittedTerm>,
    pub coefficients: Vec<f64>,
    /// One per smooth term.
    pub lambdas: Vec<f64>,
    /// One per term, in the same order as `terms`.
    pub effect_norms: Vec<EffectNorm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design_cache: Option<DesignCache>,
}

struct Covariates<'a> {
    cols: Vec<&'a [f64]>,
}

fn lookup<'a>(rows: &'a TimeTable, names: &[String]) -> Result<Covariates<'a>, TableError> {
    Ok(Covariates {
        cols: names.iter().map(|n| rows.column(n)).collect::<Result<_, _>>()?,
    })
}

/// Projects a raw basis row onto the complement of `constraint` using the
/// Householder reflector that maps `constraint` onto the first axis.
fn constrain_row(raw: &[f64], householder: &[f64], vv: f64) -> Vec<f64> {
    let dot: f64 = raw.iter().zip(householder).map(|(a, b)| a * b).sum();
    (1..raw.len())
        .map(|j| raw[j] - 2.0 * dot * householder[j] / vv)
        .collect()
}

fn householder(c: &[f64]) -> (Vec<f64>, f64) {
    let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut v = c.to_vec();
    v[0] += if c[0] >= 0.0 { norm } else { -norm };
    let vv = v.iter().map(|x| x * x).sum();
    (v, vv)
}

impl TermLayout {
    fn width(&self) -> usize {
        match self {
            Self::FactorIntercepts { levels, .. } => levels.len() - 1,
            Self::FactorSlopes { levels, .. } => levels.len(),
            Self::Linear { .. } => 1,
            Self::Smooth { constraint, .. } => constraint.len() - 1,
        }
    }

    fn required_columns(&self) -> Vec<String> {
        match self {
            Self::FactorIntercepts { factors, .. } => factors.clone(),
            Self::FactorSlopes { factor, covariate, .. } => vec![factor.clone(), covariate.clone()],
            Self::Linear { covariate } => vec![covariate.clone()],
            Self::Smooth { covariates, .. } => covariates.clone(),
        }
    }

    fn raw_smooth_row(bases: &[SplineBasis], marginal: &[Option<Vec<f64>>], values: &[f64]) -> Vec<f64> {
        let eval = |k: usize| {
            let raw = bases[k].evaluate(values[k]);
            match marginal.get(k).and_then(Option::as_ref) {
                Some(c) => {
                    let (h, vv) = householder(c);
                    constrain_row(&raw, &h, vv)
                }
                None => raw,
            }
        };
        match bases.len() {
            1 => eval(0),
            2 => tensor_row(&eval(0), &eval(1)),
            _ => unreachable!("validated smooth arity"),
        }
    }

    /// Writes this term's design entries for one row into `out`.
    fn fill(&self, cov: &Covariates<'_>, i: usize, out: &mut [f64]) {
        match self {
            Self::FactorIntercepts { levels, .. } => {
                let key: Vec<f64> = cov.cols.iter().map(|c| c[i]).collect();
                if let Some(pos) = levels.iter().position(|l| *l == key) {
                    if pos > 0 {
                        out[pos - 1] = 1.0;
                    }
                }
            }
            Self::FactorSlopes { levels, .. } => {
                if let Some(pos) = levels.iter().position(|&l| l == cov.cols[0][i]) {
                    out[pos] = cov.cols[1][i];
                }
            }
            Self::Linear { .. } => out[0] = cov.cols[0][i],
            Self::Smooth { bases, marginal_constraints, constraint, .. } => {
                let values: Vec<f64> = cov.cols.iter().map(|c| c[i]).collect();
                let raw = Self::raw_smooth_row(bases, marginal_constraints, &values);
                let (h, vv) = householder(constraint);
                out.copy_from_slice(&constrain_row(&raw, &h, vv));
            }
        }
    }

    /// Constrained penalty block, row-major `width × width`, unscaled.
    fn raw_penalty(&self) -> Option<DMatrix<f64>> {
        let Self::Smooth { bases, marginal_constraints, constraint, .. } = self else {
            return None;
        };
        let marginal = |k: usize| {
            let b = &bases[k];
            let s = DMatrix::from_row_slice(b.dim(), b.dim(), &b.penalty());
            match marginal_constraints.get(k).and_then(Option::as_ref) {
                Some(c) => project_penalty(&s, c),
                None => s,
            }
        };
        let s = match bases.len() {
            1 => marginal(0),
            2 => {
                let (sa, sb) = (marginal(0), marginal(1));
                let (ma, mb) = (sa.nrows(), sb.nrows());
                let flat = |m: &DMatrix<f64>| m.transpose().iter().copied().collect::<Vec<_>>();
                DMatrix::from_row_slice(ma * mb, ma * mb, &tensor_penalty(&flat(&sa), ma, &flat(&sb), mb))
            }
            _ => unreachable!(),
        };
        Some(project_penalty(&s, constraint))
    }
}

/// `Zᵀ S Z` where `Z` spans the orthogonal complement of `c`.
fn project_penalty(s: &DMatrix<f64>, c: &[f64]) -> DMatrix<f64> {
    let m = c.len();
    let (h, vv) = householder(c);
    let hv = DVector::from_vec(h);
    let hmat = DMatrix::identity(m, m) - (&hv * hv.transpose()) * (2.0 / vv);
    let full = &hmat * s * &hmat;
    full.view((1, 1), (m - 1, m - 1)).into_owned()
}

fn usable_rows(data: &TimeTable, needed: &[String]) -> Result<Vec<usize>, GamError> {
    let cols: Vec<&[f64]> = needed.iter().map(|n| data.column(n)).collect::<Result<_, _>>()?;
    let usable = data.column(col::USABLE).ok();
    Ok((0..data.len())
        .filter(|&i| usable.map_or(true, |u| u[i] == 1.0) && cols.iter().all(|c| c[i].is_finite()))
        .collect())
}

fn distinct_sorted(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Fits `spec` on the usable rows of `data` (rows with `usable = 1` when that
/// column exists and finite values for every covariate), response `load`.
pub fn fit_penalized(spec: &GamSpec, data: &TimeTable, lambda: &Lambda) -> Result<FittedGam, GamError> {
    fit_penalized_on(spec, data, col::LOAD, lambda)
}

pub fn fit_penalized_on(
    spec: &GamSpec,
    data: &TimeTable,
    response: &str,
    lambda: &Lambda,
) -> Result<FittedGam, GamError> {
    spec.validate()?;
    let mut needed = vec![response.to_string()];
    for t in &spec.parametric_terms {
        match t {
            ParametricTerm::FactorIntercepts { factors, .. } => needed.extend(factors.iter().cloned()),
            ParametricTerm::FactorSlopes { factor, covariate, .. } => {
                needed.push(factor.clone());
                needed.push(covariate.clone());
            }
            ParametricTerm::Linear { covariate, .. } => needed.push(covariate.clone()),
        }
    }
    for s in &spec.smooth_terms {
        needed.extend(s.covariates.iter().cloned());
    }
    let rows = usable_rows(data, &needed)?;
    if rows.is_empty() {
        return Err(GamError::NoUsableRows);
    }
    let train = data.select(&rows);
    let y = DVector::from_column_slice(train.column(response)?);

    // Lay out terms and learn their data-dependent structure.
    let mut terms = Vec::new();
    let mut start = 1;
    for t in &spec.parametric_terms {
        let layout = match t {
            ParametricTerm::FactorIntercepts { factors, .. } => {
                let cov = lookup(&train, factors)?;
                let mut levels: Vec<Vec<f64>> = (0..train.len())
                    .map(|i| cov.cols.iter().map(|c| c[i]).collect())
                    .collect();
                levels.sort_by(|a: &Vec<f64>, b| {
                    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
                });
                levels.dedup();
                TermLayout::FactorIntercepts { factors: factors.clone(), levels }
            }
            ParametricTerm::FactorSlopes { factor, covariate, .. } => TermLayout::FactorSlopes {
                factor: factor.clone(),
                covariate: covariate.clone(),
                levels: distinct_sorted(train.column(factor)?.iter().copied()),
            },
            ParametricTerm::Linear { covariate, .. } => TermLayout::Linear { covariate: covariate.clone() },
        };
        let len = layout.width();
        terms.push(FittedTerm { name: t.name().to_string(), start, len, layout });
        start += len;
    }
    for s in &spec.smooth_terms {
        let bases = s
            .covariates
            .iter()
            .zip(&s.basis_dim)
            .map(|(c, &m)| {
                SplineBasis::build(train.column(c)?, m).map_err(|source| GamError::Basis {
                    term: s.name.clone(),
                    source,
                })
            })
            .collect::<Result<Vec<_>, GamError>>()?;
        let cov = lookup(&train, &s.covariates)?;
        // In a tensor, drop the constant direction of one marginal when the
        // other covariate already has its own univariate smooth.
        let has_main = |c: &str| {
            spec.smooth_terms
                .iter()
                .any(|o| o.covariates.len() == 1 && o.covariates[0] == c)
        };
        let marginal_constraints: Vec<Option<Vec<f64>>> = if s.covariates.len() == 2 {
            (0..2)
                .map(|k| {
                    has_main(&s.covariates[1 - k]).then(|| {
                        let mut sums = vec![0.0; bases[k].dim()];
                        for &x in cov.cols[k] {
                            for (acc, v) in sums.iter_mut().zip(bases[k].evaluate(x)) {
                                *acc += v;
                            }
                        }
                        sums
                    })
                })
                .collect()
        } else {
            vec![None]
        };
        let m: usize = bases
            .iter()
            .zip(&marginal_constraints)
            .map(|(b, mc)| b.dim() - usize::from(mc.is_some()))
            .product();
        let mut constraint = vec![0.0; m];
        for i in 0..train.len() {
            let values: Vec<f64> = cov.cols.iter().map(|c| c[i]).collect();
            let row = TermLayout::raw_smooth_row(&bases, &marginal_constraints, &values);
            for (acc, v) in constraint.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let layout = TermLayout::Smooth {
            covariates: s.covariates.clone(),
            bases,
            marginal_constraints,
            constraint,
            penalty_scale: 1.0,
        };
        let len = layout.width();
        terms.push(FittedTerm { name: s.name.clone(), start, len, layout });
        start += len;
    }
    let p = start;

    let mut model = FittedGam {
        format_version: FORMAT_VERSION,
        spec: spec.clone(),
        terms,
        coefficients: vec![0.0; p],
        lambdas: vec![0.0; spec.smooth_terms.len()],
        effect_norms: Vec::new(),
        design_cache: None,
    };
    let x = model.design(&train)?;
    let xtx = x.tr_mul(&x);
    let xty = x.tr_mul(&y);
    let yty = y.dot(&y);

    // Scale each penalty to the magnitude of its design block.
    let mut penalties = Vec::new();
    for term in model.terms.iter_mut() {
        let Some(raw) = term.layout.raw_penalty() else { continue };
        let r = term.columns();
        let block = xtx.view((r.start, r.start), (term.len, term.len));
        let scale = if raw.norm() > 0.0 { block.norm() / raw.norm() } else { 1.0 };
        if let TermLayout::Smooth { penalty_scale, .. } = &mut term.layout {
            *penalty_scale = scale;
        }
        penalties.push((r, raw * scale));
    }

    check_rank(&xtx, &penalties)?;

    let lambdas = match lambda {
        Lambda::Fixed(l) => {
            if l.len() != penalties.len() {
                return Err(GamError::LambdaCount { expected: penalties.len(), got: l.len() });
            }
            l.clone()
        }
        Lambda::Auto => select_lambda_gcv(&xtx, &xty, yty, y.len(), &penalties)?,
    };
    let beta = solve_penalized(&xtx, &xty, &penalties, &lambdas)
        .ok_or(GamError::RankDeficientDesign(0.0))?;
    model.coefficients = beta.iter().copied().collect();
    model.lambdas = lambdas;

    let contributions = model.term_contributions_matrix(&x);
    model.effect_norms = contributions
        .iter()
        .map(|c| {
            let n = c.len() as f64;
            let mean = c.iter().sum::<f64>() / n;
            let var = c.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            EffectNorm { mean, sd: var.sqrt() }
        })
        .collect();
    Ok(model)
}

fn penalized_matrix(xtx: &DMatrix<f64>, penalties: &[(Range<usize>, DMatrix<f64>)], lambdas: &[f64]) -> DMatrix<f64> {
    let mut m = xtx.clone();
    for ((r, s), &l) in penalties.iter().zip(lambdas) {
        let mut block = m.view_mut((r.start, r.start), (r.len(), r.len()));
        block += s * l;
    }
    m
}

fn solve_penalized(
    xtx: &DMatrix<f64>,
    xty: &DVector<f64>,
    penalties: &[(Range<usize>, DMatrix<f64>)],
    lambdas: &[f64],
) -> Option<DVector<f64>> {
    let m = penalized_matrix(xtx, penalties, lambdas);
    m.cholesky().map(|c| c.solve(xty))
}

fn check_rank(xtx: &DMatrix<f64>, penalties: &[(Range<usize>, DMatrix<f64>)]) -> Result<(), GamError> {
    let ones = vec![1.0; penalties.len()];
    let mut m = penalized_matrix(xtx, penalties, &ones);
    // Unit diagonal, so wildly different column scales do not look singular.
    let d: Vec<f64> = m.diagonal().iter().map(|&v| if v > 0.0 { 1.0 / v.sqrt() } else { 0.0 }).collect();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            m[(i, j)] *= d[i] * d[j];
        }
    }
    let eig = m.symmetric_eigenvalues();
    let max = eig.max();
    let min = eig.min();
    let ratio = if max > 0.0 { min / max } else { 0.0 };
    if !(ratio > 1e-13) {
        return Err(GamError::RankDeficientDesign(ratio));
    }
    Ok(())
}

/// Generalized cross-validation score `n·RSS / (n − tr A)²`.
fn gcv_score(
    xtx: &DMatrix<f64>,
    xty: &DVector<f64>,
    yty: f64,
    n: usize,
    penalties: &[(Range<usize>, DMatrix<f64>)],
    lambdas: &[f64],
) -> Option<f64> {
    let chol = penalized_matrix(xtx, penalties, lambdas).cholesky()?;
    let beta = chol.solve(xty);
    let rss = (yty - 2.0 * beta.dot(xty) + beta.dot(&(xtx * &beta))).max(0.0);
    let edf = chol.solve(xtx).trace();
    let resid_df = n as f64 - edf;
    if resid_df <= 0.0 {
        return None;
    }
    Some(n as f64 * rss / (resid_df * resid_df))
}

/// Coordinate-wise GCV search over the decade grid, starting from λ = 1 for
/// every smooth; ties keep the current value.
fn select_lambda_gcv(
    xtx: &DMatrix<f64>,
    xty: &DVector<f64>,
    yty: f64,
    n: usize,
    penalties: &[(Range<usize>, DMatrix<f64>)],
) -> Result<Vec<f64>, GamError> {
    let grid: Vec<f64> = LAMBDA_GRID_EXPONENTS.map(|e| 10f64.powi(e)).collect();
    let mut lambdas = vec![1.0; penalties.len()];
    if penalties.is_empty() {
        return Ok(lambdas);
    }
    let mut best = gcv_score(xtx, xty, yty, n, penalties, &lambdas).unwrap_or(f64::INFINITY);
    for _sweep in 0..3 {
        let mut changed = false;
        for j in 0..penalties.len() {
            for &g in &grid {
                if g == lambdas[j] {
                    continue;
                }
                let mut trial = lambdas.clone();
                trial[j] = g;
                if let Some(score) = gcv_score(xtx, xty, yty, n, penalties, &trial) {
                    if score < best {
                        best = score;
                        lambdas = trial;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok(lambdas)
}

impl FittedGam {
    pub fn n_coefficients(&self) -> usize {
        self.coefficients.len()
    }

    /// Number of effects `d`; the adaptive feature vector has `1 + d` entries.
    pub fn effect_count(&self) -> usize {
        self.terms.len()
    }

    pub fn term(&self, name: &str) -> Option<&FittedTerm> {
        self.terms.iter().find(|t| t.name == name)
    }

    /// Design matrix for `rows`. Smooth covariates are clamped to the
    /// training range; unseen factor levels contribute nothing.
    pub fn design(&self, rows: &TimeTable) -> Result<DMatrix<f64>, GamError> {
        let p = self.n_coefficients();
        let n = rows.len();
        let covs: Vec<Covariates<'_>> = self
            .terms
            .iter()
            .map(|t| lookup(rows, &t.layout.required_columns()))
            .collect::<Result<_, _>>()?;
        self.log_clamping(rows);
        let mut data = vec![0.0; n * p];
        for i in 0..n {
            let row = &mut data[i * p..(i + 1) * p];
            row[0] = 1.0;
            for (t, cov) in self.terms.iter().zip(&covs) {
                t.layout.fill(cov, i, &mut row[t.columns()]);
            }
        }
        Ok(DMatrix::from_row_slice(n, p, &data))
    }

    fn log_clamping(&self, rows: &TimeTable) {
        if !log::log_enabled!(log::Level::Debug) {
            return;
        }
        for t in &self.terms {
            if let TermLayout::Smooth { covariates, bases, .. } = &t.layout {
                for (c, b) in covariates.iter().zip(bases) {
                    if let Ok(v) = rows.column(c) {
                        let outside = v.iter().filter(|&&x| x < b.lower() || x > b.upper()).count();
                        if outside > 0 {
                            log::debug!("{}: clamped {outside} value(s) of `{c}` to the training range", t.name);
                        }
                    }
                }
            }
        }
    }

    pub fn predict(&self, rows: &TimeTable) -> Result<Vec<f64>, GamError> {
        self.predict_with(&self.coefficients, rows)
    }

    /// Forecasts with an alternative coefficient vector on this model's design.
    pub fn predict_with(&self, beta: &[f64], rows: &TimeTable) -> Result<Vec<f64>, GamError> {
        if beta.len() != self.n_coefficients() {
            return Err(GamError::DimensionMismatch { expected: self.n_coefficients(), got: beta.len() });
        }
        let x = self.design(rows)?;
        let b = DVector::from_column_slice(beta);
        Ok((x * b).iter().copied().collect())
    }

    fn term_contributions_matrix(&self, x: &DMatrix<f64>) -> Vec<Vec<f64>> {
        let beta = DVector::from_column_slice(&self.coefficients);
        self.terms
            .iter()
            .map(|t| {
                let r = t.columns();
                let xb = x.columns(r.start, r.len()) * beta.rows(r.start, r.len());
                xb.iter().copied().collect()
            })
            .collect()
    }

    /// Raw contribution of every term for every row, `[term][row]`.
    pub fn term_contributions(&self, rows: &TimeTable) -> Result<Vec<Vec<f64>>, GamError> {
        Ok(self.term_contributions_matrix(&self.design(rows)?))
    }

    /// The frozen, normalized effect vector `(1, f̄₁, …, f̄_d)` for each row.
    pub fn effect_values(&self, rows: &TimeTable) -> Result<Vec<DVector<f64>>, GamError> {
        for (t, norm) in self.terms.iter().zip(&self.effect_norms) {
            if norm.sd < MIN_EFFECT_SD {
                return Err(GamError::DegenerateEffect(t.name.clone()));
            }
        }
        let contrib = self.term_contributions(rows)?;
        let d = self.effect_count();
        Ok((0..rows.len())
            .map(|i| {
                DVector::from_fn(d + 1, |j, _| {
                    if j == 0 {
                        1.0
                    } else {
                        let n = self.effect_norms[j - 1];
                        (contrib[j - 1][i] - n.mean) / n.sd
                    }
                })
            })
            .collect())
    }

    /// Coefficients on the normalized effects that reproduce [`predict`]:
    /// `(β₀ + Σ mean_j, sd_1, …, sd_d)`.
    ///
    /// [`predict`]: FittedGam::predict
    pub fn frozen_theta(&self) -> DVector<f64> {
        let d = self.effect_count();
        DVector::from_fn(d + 1, |j, _| {
            if j == 0 {
                self.coefficients[0] + self.effect_norms.iter().map(|n| n.mean).sum::<f64>()
            } else {
                self.effect_norms[j - 1].sd
            }
        })
    }

    pub fn cache_design(&mut self, rows: &TimeTable) -> Result<(), GamError> {
        let x = self.design(rows)?;
        self.design_cache = Some(DesignCache {
            rows: x.nrows(),
            cols: x.ncols(),
            data: x.transpose().iter().copied().collect(),
        });
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, GamError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, GamError> {
        let model: Self = serde_json::from_str(s)?;
        if model.format_version != FORMAT_VERSION {
            return Err(GamError::InvalidSpec(format!(
                "unsupported model format version {}",
                model.format_version
            )));
        }
        Ok(model)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use chrono::{Duration, TimeZone, Utc};
    use indexmap::IndexMap;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    pub(crate) fn table(cols: Vec<(&str, Vec<f64>)>) -> TimeTable {
        let n = cols[0].1.len();
        let t0 = Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap();
        let ts = (0..n).map(|i| t0 + Duration::days(i as i64)).collect();
        let map: IndexMap<String, Vec<f64>> = cols.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        TimeTable::new(ts, map, 1440).unwrap()
    }

    fn smooth_only(dim: usize) -> GamSpec {
        GamSpec {
            parametric_terms: vec![],
            smooth_terms: vec![SmoothTerm::univariate("s_x", "x", dim)],
            penalty_order: 2,
        }
    }

    #[test]
    fn reproduces_a_line_without_penalty() {
        let x: Vec<f64> = (0..200).map(|i| i as f64 / 20.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let data = table(vec![("x", x.clone()), (col::LOAD, y.clone())]);
        let m = fit_penalized(&smooth_only(10), &data, &Lambda::Fixed(vec![0.0])).unwrap();
        let pred = m.predict(&data).unwrap();
        for (p, t) in pred.iter().zip(&y) {
            assert!((p - t).abs() < 1e-8);
        }
    }

    #[test]
    fn pure_parametric_fit_is_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 120;
        let day: Vec<f64> = (0..n).map(|i| (i % 7 + 1) as f64).collect();
        let dls: Vec<f64> = (0..n).map(|i| ((i / 30) % 2) as f64).collect();
        let lag: Vec<f64> = (0..n).map(|_| rng.random_range(10.0..20.0)).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| 3.0 + day[i] * 0.5 + dls[i] + lag[i] * (0.1 * day[i]) + rng.random_range(-1.0..1.0))
            .collect();
        let spec = GamSpec {
            parametric_terms: vec![
                ParametricTerm::FactorIntercepts { name: "dd".into(), factors: vec!["day".into(), "dls".into()] },
                ParametricTerm::FactorSlopes { name: "lag_by_day".into(), factor: "day".into(), covariate: "lag".into() },
            ],
            smooth_terms: vec![],
            penalty_order: 2,
        };
        let data = table(vec![("day", day.clone()), ("dls", dls.clone()), ("lag", lag.clone()), (col::LOAD, y.clone())]);
        let m = fit_penalized(&spec, &data, &Lambda::Auto).unwrap();
        // Normal-equations oracle on an independently built design.
        let mut levels: Vec<(i64, i64)> = (0..n).map(|i| (day[i] as i64, dls[i] as i64)).collect();
        levels.sort();
        levels.dedup();
        let p = 1 + levels.len() - 1 + 7;
        let x = DMatrix::from_fn(n, p, |i, j| {
            if j == 0 {
                1.0
            } else if j < levels.len() {
                f64::from(levels[j] == (day[i] as i64, dls[i] as i64))
            } else {
                let d = (j - levels.len() + 1) as f64;
                if day[i] == d { lag[i] } else { 0.0 }
            }
        });
        let yv = DVector::from_vec(y);
        let oracle = (x.transpose() * &x).lu().solve(&(x.transpose() * yv)).unwrap();
        for (a, b) in m.coefficients.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-8 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn sine_recovered_below_noise_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let x: Vec<f64> = (0..500).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| (2.0 * std::f64::consts::PI * v).sin() + noise.sample(&mut rng)).collect();
        let data = table(vec![("x", x), (col::LOAD, y.clone())]);
        let m = fit_penalized(&smooth_only(10), &data, &Lambda::Auto).unwrap();
        let pred = m.predict(&data).unwrap();
        let rmse = (pred.iter().zip(&y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / 500.0).sqrt();
        assert!(rmse < 0.15, "rmse {rmse}");
    }

    #[test]
    fn huge_lambda_collapses_smooth_to_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..300).map(|_| rng.random_range(-2.0..3.0)).collect();
        let z: Vec<f64> = (0..300).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a.powi(3) + (6.0 * b).cos()).collect();
        let spec = GamSpec {
            parametric_terms: vec![],
            smooth_terms: vec![SmoothTerm::univariate("s_x", "x", 10), SmoothTerm::univariate("s_z", "z", 8)],
            penalty_order: 2,
        };
        let data = table(vec![("x", x.clone()), ("z", z.clone()), (col::LOAD, y)]);
        let m = fit_penalized(&spec, &data, &Lambda::Fixed(vec![1e12, 1e12])).unwrap();
        let contrib = m.term_contributions(&data).unwrap();
        for (effect, cov) in contrib.iter().zip([&x, &z]) {
            assert!(linear_fit_residual(cov, effect) < 1e-4 * (1.0 + spread(effect)));
        }
    }

    fn spread(v: &[f64]) -> f64 {
        v.iter().copied().fold(f64::NEG_INFINITY, f64::max) - v.iter().copied().fold(f64::INFINITY, f64::min)
    }

    fn linear_fit_residual(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let slope = sxy / sxx;
        x.iter().zip(y).map(|(a, b)| (b - my - slope * (a - mx)).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn objective_monotone_in_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| (9.0 * v).sin() + rng.random_range(-0.3..0.3)).collect();
        let data = table(vec![("x", x), (col::LOAD, y.clone())]);
        let objective = |lam: f64| {
            let m = fit_penalized(&smooth_only(10), &data, &Lambda::Fixed(vec![lam])).unwrap();
            let pred = m.predict(&data).unwrap();
            let rss: f64 = pred.iter().zip(&y).map(|(p, t)| (p - t).powi(2)).sum();
            let t = &m.terms[0];
            let s = t.layout.raw_penalty().unwrap();
            let TermLayout::Smooth { penalty_scale, .. } = t.layout else { unreachable!() };
            let b = DVector::from_column_slice(&m.coefficients[t.columns()]);
            rss + lam * penalty_scale * b.dot(&(s * &b))
        };
        let (hi, mid, lo) = (objective(100.0), objective(1.0), objective(0.01));
        assert!(hi > mid && mid > lo, "{hi} {mid} {lo}");
    }

    #[test]
    fn gcv_picks_smallest_lambda_on_noiseless_spline() {
        let x: Vec<f64> = (0..300).map(|i| i as f64 / 299.0).collect();
        let basis = SplineBasis::build(&x, 10).unwrap();
        let coefs = [0.0, 3.0, -1.0, 4.0, 0.5, -2.0, 2.5, 1.0, -3.0, 0.0];
        let y: Vec<f64> = x.iter().map(|&v| basis.evaluate(v).iter().zip(&coefs).map(|(a, b)| a * b).sum()).collect();
        let data = table(vec![("x", x), (col::LOAD, y)]);
        let m = fit_penalized(&smooth_only(10), &data, &Lambda::Auto).unwrap();
        assert!(m.lambdas[0] < 1e-3, "{:?}", m.lambdas);
    }

    #[test]
    fn additivity_and_effect_normalization() {
        let (data, m) = load_model_fixture();
        let rows: Vec<usize> = (0..data.len()).filter(|&i| data.column(col::USABLE).unwrap()[i] == 1.0).collect();
        let train = data.select(&rows);
        let pred = m.predict(&train).unwrap();
        let contrib = m.term_contributions(&train).unwrap();
        for i in 0..train.len() {
            let sum: f64 = m.coefficients[0] + contrib.iter().map(|c| c[i]).sum::<f64>();
            assert!((sum - pred[i]).abs() < 1e-10 * pred[i].abs().max(1.0));
        }
        let f = m.effect_values(&train).unwrap();
        assert_eq!(f[0].len(), 10);
        assert!(f.iter().all(|v| v[0] == 1.0));
        let n = f.len() as f64;
        for j in 1..10 {
            let mean = f.iter().map(|v| v[j]).sum::<f64>() / n;
            let var = f.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-8 && (var.sqrt() - 1.0).abs() < 1e-8);
        }
        let theta = m.frozen_theta();
        let y = train.column(col::LOAD).unwrap();
        let mean_y = y.iter().sum::<f64>() / n;
        assert!((theta[0] - mean_y).abs() < 1e-6 * mean_y.abs());
        let pred = m.predict(&train).unwrap();
        for (fi, p) in f.iter().zip(&pred) {
            assert!((theta.dot(fi) - p).abs() < 1e-6 * p.abs());
        }
    }

    #[test]
    fn predict_is_stateless_and_linear_in_coefficients() {
        let (data, m) = load_model_fixture();
        let batch = m.predict(&data).unwrap();
        for i in [7 * 1 + 10, 100, 300] {
            let one = m.predict(&data.slice(i..i + 1)).unwrap();
            assert_eq!(one[0], batch[i]);
        }
        let zeros = vec![0.0; m.n_coefficients()];
        assert!(m.predict_with(&zeros, &data.slice(7..data.len())).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let (_, m) = load_model_fixture();
        let s = m.to_json().unwrap();
        let back = FittedGam::from_json(&s).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json().unwrap(), s);
    }

    #[test]
    fn errors() {
        let data = table(vec![("x", vec![1.0, 2.0, 3.0]), (col::LOAD, vec![1.0, 2.0, 3.0])]);
        assert!(matches!(
            fit_penalized(&smooth_only(10), &data, &Lambda::Auto),
            Err(GamError::Basis { .. })
        ));
        let data = table(vec![("x", vec![f64::NAN; 3]), (col::LOAD, vec![1.0, 2.0, 3.0])]);
        assert!(matches!(fit_penalized(&smooth_only(4), &data, &Lambda::Auto), Err(GamError::NoUsableRows)));
        let collinear = GamSpec {
            parametric_terms: vec![
                ParametricTerm::Linear { name: "a".into(), covariate: "x".into() },
                ParametricTerm::Linear { name: "b".into(), covariate: "x2".into() },
            ],
            smooth_terms: vec![],
            penalty_order: 2,
        };
        let x: Vec<f64> = (0..20).map(f64::from).collect();
        let data = table(vec![("x", x.clone()), ("x2", x.iter().map(|v| 2.0 * v).collect()), (col::LOAD, x)]);
        assert!(matches!(
            fit_penalized(&collinear, &data, &Lambda::Auto),
            Err(GamError::RankDeficientDesign(_))
        ));
        let data = table(vec![("x", (0..20).map(f64::from).collect()), (col::LOAD, vec![1.0; 20])]);
        let m = fit_penalized(&smooth_only(4), &data, &Lambda::Fixed(vec![1.0])).unwrap();
        assert!(matches!(m.effect_values(&data), Err(GamError::DegenerateEffect(_))));
        assert!(matches!(
            m.predict(&table(vec![("y", vec![1.0])])),
            Err(GamError::Table(TableError::MissingColumn(_)))
        ));
    }

    /// Synthetic daily series carrying every covariate of the load model.
    pub(crate) fn load_model_fixture() -> (TimeTable, FittedGam) {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 500;
        let mut cols: IndexMap<&str, Vec<f64>> = IndexMap::new();
        let mut load = Vec::new();
        for i in 0..n {
            let day = (i % 7 + 1) as f64;
            let toy = (i % 365) as f64 / 364.0;
            let temp = 12.0 - 8.0 * (2.0 * std::f64::consts::PI * toy).cos() + rng.random_range(-3.0..3.0);
            let base = 50_000.0 - 900.0 * temp + if day >= 6.0 { -6_000.0 } else { 0.0 };
            let y = base + rng.random_range(-500.0..500.0);
            load.push(y);
            cols.entry(col::DAY_TYPE).or_default().push(day);
            cols.entry(col::DLS).or_default().push(f64::from((90..300).contains(&(i % 365))));
            cols.entry(col::TOY).or_default().push(toy);
            cols.entry(col::TIME).or_default().push(18_000.0 + i as f64);
            cols.entry(col::TEMP).or_default().push(temp);
        }
        let temp = cols[col::TEMP].clone();
        let t95 = crate::features::exp_smooth(&temp, 0.95).unwrap();
        let t99 = crate::features::exp_smooth(&temp, 0.99).unwrap();
        cols.insert(col::TEMP95, t95);
        cols.insert(col::TEMP99, t99.clone());
        let daily_min: Vec<f64> = temp.iter().map(|v| v - rng.random_range(2.0..6.0)).collect();
        let daily_max: Vec<f64> = temp.iter().map(|v| v + rng.random_range(2.0..6.0)).collect();
        cols.insert(col::TEMPMIN99, crate::features::exp_smooth(&daily_min, 0.99).unwrap());
        cols.insert(col::TEMPMAX99, crate::features::exp_smooth(&daily_max, 0.99).unwrap());
        cols.insert(col::LOAD1D, (0..n).map(|i| if i >= 1 { load[i - 1] } else { f64::NAN }).collect());
        cols.insert(col::LOAD1W, (0..n).map(|i| if i >= 7 { load[i - 7] } else { f64::NAN }).collect());
        cols.insert(col::USABLE, (0..n).map(|i| f64::from(i >= 7)).collect());
        cols.insert(col::LOAD, load);
        let data = table(cols.into_iter().collect());
        let m = fit_penalized(&GamSpec::load_model(), &data, &Lambda::Auto).unwrap();
        (data, m)
    }
}
