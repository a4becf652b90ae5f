//! Cubic B-spline bases with quantile knots and second-derivative penalties.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CUBIC: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum SplineError {
    #[error("need at least {needed} distinct values to build a basis of dimension {needed}, found {found}")]
    TooFewDistinctValues { needed: usize, found: usize },
    #[error("basis dimension {0} is below the cubic minimum of 4")]
    DimensionTooSmall(usize),
    #[error("non-finite covariate value")]
    NonFinite,
}

/// A clamped cubic B-spline basis of dimension `dim` on `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    /// Full knot vector with the boundary knots repeated `degree + 1` times.
    pub knots: Vec<f64>,
    pub degree: usize,
}

impl SplineBasis {
    /// Builds a basis whose interior knots sit at quantiles of `x`.
    pub fn build(x: &[f64], dim: usize) -> Result<Self, SplineError> {
        if dim < CUBIC + 1 {
            return Err(SplineError::DimensionTooSmall(dim));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SplineError::NonFinite);
        }
        let mut sorted = x.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut distinct = sorted.clone();
        distinct.dedup();
        if distinct.len() < dim {
            return Err(SplineError::TooFewDistinctValues {
                needed: dim,
                found: distinct.len(),
            });
        }
        let lo = distinct[0];
        let hi = *distinct.last().unwrap();
        let n_interior = dim - CUBIC - 1;
        let mut interior = quantiles(&sorted, n_interior);
        let strictly_inside = |k: &[f64]| {
            k.windows(2).all(|w| w[0] < w[1]) && k.first().map_or(true, |&a| a > lo)
                && k.last().map_or(true, |&b| b < hi)
        };
        if !strictly_inside(&interior) {
            // Heavy ties: fall back to quantiles of the distinct values.
            interior = quantiles(&distinct, n_interior);
        }
        let mut knots = vec![lo; CUBIC + 1];
        knots.extend(interior);
        knots.extend(std::iter::repeat(hi).take(CUBIC + 1));
        Ok(Self {
            knots,
            degree: CUBIC,
        })
    }

    pub fn dim(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn lower(&self) -> f64 {
        self.knots[0]
    }

    pub fn upper(&self) -> f64 {
        *self.knots.last().unwrap()
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lower(), self.upper())
    }

    /// All basis functions at `x` (clamped to the knot range).
    pub fn evaluate(&self, x: f64) -> Vec<f64> {
        self.derivative(x, 0)
    }

    /// `order`-th derivative of every basis function at `x`.
    pub fn derivative(&self, x: f64, order: usize) -> Vec<f64> {
        let x = self.clamp(x);
        if order > self.degree {
            return vec![0.0; self.dim()];
        }
        let base = self.degree - order;
        let mut values = lower_degree_values(&self.knots, x, base);
        // d/dx N_{i,q+1} = (q+1)·(N_{i,q}/(t_{i+q+1}−t_i) − N_{i+1,q}/(t_{i+q+2}−t_{i+1}))
        for q in base..self.degree {
            let next: Vec<f64> = (0..values.len() - 1)
                .map(|i| {
                    let a = ratio(values[i], self.knots[i + q + 1] - self.knots[i]);
                    let b = ratio(values[i + 1], self.knots[i + q + 2] - self.knots[i + 1]);
                    (q + 1) as f64 * (a - b)
                })
                .collect();
            values = next;
        }
        values
    }

    /// Integrated squared second derivative, `S[i][j] = ∫ B_i''(x) B_j''(x) dx`,
    /// row-major `dim × dim`.
    pub fn penalty(&self) -> Vec<f64> {
        let m = self.dim();
        let mut s = vec![0.0; m * m];
        // Second derivatives of cubics are piecewise linear, so a 3-point
        // Gauss-Legendre rule is exact on every knot span.
        let nodes = [-(0.6f64).sqrt(), 0.0, (0.6f64).sqrt()];
        let weights = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
        for span in self.knots.windows(2) {
            let (a, b) = (span[0], span[1]);
            if b <= a {
                continue;
            }
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (node, w) in nodes.iter().zip(weights) {
                let d2 = self.derivative(mid + half * node, 2);
                for i in 0..m {
                    if d2[i] == 0.0 {
                        continue;
                    }
                    for j in 0..m {
                        s[i * m + j] += w * half * d2[i] * d2[j];
                    }
                }
            }
        }
        s
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Values of all degree-`q` B-splines on `knots` at `x` via Cox-de Boor.
/// At the right end the last non-empty span is treated as closed.
fn lower_degree_values(knots: &[f64], x: f64, q: usize) -> Vec<f64> {
    let n0 = knots.len() - 1;
    let mut n: Vec<f64> = vec![0.0; n0];
    let last_span = (0..n0).rev().find(|&i| knots[i] < knots[i + 1]).unwrap_or(0);
    let span = if x >= knots[last_span + 1] {
        last_span
    } else {
        (0..n0)
            .find(|&i| knots[i] <= x && x < knots[i + 1])
            .unwrap_or(last_span)
    };
    n[span] = 1.0;
    for d in 1..=q {
        let len = n0 - d;
        let next: Vec<f64> = (0..len)
            .map(|i| {
                let left = ratio((x - knots[i]) * n[i], knots[i + d] - knots[i]);
                let right = ratio((knots[i + d + 1] - x) * n[i + 1], knots[i + d + 1] - knots[i + 1]);
                left + right
            })
            .collect();
        n = next;
    }
    n
}

fn quantiles(sorted: &[f64], count: usize) -> Vec<f64> {
    let n = sorted.len();
    (1..=count)
        .map(|k| {
            let p = k as f64 / (count + 1) as f64;
            let pos = p * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = pos - lo as f64;
            sorted[lo] + frac * (sorted[hi] - sorted[lo])
        })
        .collect()
}

/// Row-wise Kronecker product of two marginal bases, index `a * dim_b + b`.
pub fn tensor_row(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().flat_map(|&va| b.iter().map(move |&vb| va * vb)).collect()
}

/// `S_a ⊗ I_b + I_a ⊗ S_b`, row-major.
pub fn tensor_penalty(sa: &[f64], ma: usize, sb: &[f64], mb: usize) -> Vec<f64> {
    let m = ma * mb;
    let mut s = vec![0.0; m * m];
    for i in 0..ma {
        for j in 0..ma {
            for k in 0..mb {
                s[(i * mb + k) * m + (j * mb + k)] += sa[i * ma + j];
            }
        }
    }
    for i in 0..ma {
        for k in 0..mb {
            for l in 0..mb {
                s[(i * mb + k) * m + (i * mb + l)] += sb[k * mb + l];
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn partition_of_unity_and_nonnegativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..300).map(|_| rng.random_range(-3.0..7.0)).collect();
        for m in [4, 5, 10, 14] {
            let b = SplineBasis::build(&x, m).unwrap();
            assert_eq!(b.dim(), m);
            for _ in 0..1000 {
                let v = b.evaluate(rng.random_range(b.lower()..=b.upper()));
                assert!(v.iter().all(|&e| e >= 0.0));
                assert!((v.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
            }
            let end = b.evaluate(b.upper());
            assert!((end.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert_eq!(end[m - 1], 1.0);
        }
    }

    #[test]
    fn too_few_distinct_values() {
        let x = [1.0, 1.0, 2.0, 3.0, 3.0];
        assert_eq!(
            SplineBasis::build(&x, 4),
            Err(SplineError::TooFewDistinctValues { needed: 4, found: 3 })
        );
        assert_eq!(SplineBasis::build(&x, 3), Err(SplineError::DimensionTooSmall(3)));
    }

    #[test]
    fn tied_data_falls_back_to_distinct_quantiles() {
        let mut x = vec![0.0; 200];
        x.extend([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let b = SplineBasis::build(&x, 10).unwrap();
        assert!(b.knots.windows(2).all(|w| w[0] <= w[1]));
        assert!(b.knots[4..10].windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let x = grid(50, 0.0, 10.0);
        let b = SplineBasis::build(&x, 8).unwrap();
        let h = 1e-5;
        for &p in &[0.7, 3.3, 5.01, 9.2] {
            let d1 = b.derivative(p, 1);
            let (up, dn) = (b.evaluate(p + h), b.evaluate(p - h));
            for i in 0..8 {
                let fd = (up[i] - dn[i]) / (2.0 * h);
                assert!((d1[i] - fd).abs() < 1e-6, "d1 {i} at {p}");
            }
            let d2 = b.derivative(p, 2);
            let (up, dn) = (b.derivative(p + h, 1), b.derivative(p - h, 1));
            for i in 0..8 {
                let fd = (up[i] - dn[i]) / (2.0 * h);
                assert!((d2[i] - fd).abs() < 1e-5, "d2 {i} at {p}");
            }
        }
    }

    #[test]
    fn penalty_is_symmetric_psd_and_kills_lines() {
        let x = grid(100, -2.0, 5.0);
        let b = SplineBasis::build(&x, 10).unwrap();
        let m = b.dim();
        let s = DMatrix::from_row_slice(m, m, &b.penalty());
        assert!((&s - s.transpose()).abs().max() < 1e-10);
        let eig = s.clone().symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&e| e > -1e-9));
        // Coefficients of a line: the Greville abscissae reproduce x exactly.
        let greville: Vec<f64> = (0..m)
            .map(|i| (b.knots[i + 1] + b.knots[i + 2] + b.knots[i + 3]) / 3.0)
            .collect();
        let line = DVector::from_iterator(m, greville.iter().map(|g| 2.0 * g + 1.0));
        for &p in &[-1.5, 0.0, 4.9] {
            let v = b.evaluate(p);
            let f: f64 = v.iter().zip(line.iter()).map(|(a, c)| a * c).sum();
            assert!((f - (2.0 * p + 1.0)).abs() < 1e-10);
        }
        let pen = line.dot(&(&s * &line));
        assert!(pen.abs() < 1e-8 * s.abs().max());
    }

    #[test]
    fn penalty_matches_direct_quadrature() {
        let x = grid(40, 0.0, 1.0);
        let b = SplineBasis::build(&x, 6).unwrap();
        let m = b.dim();
        let s = b.penalty();
        // Midpoint-rule oracle on a fine grid.
        let n = 20_000;
        let h = 1.0 / n as f64;
        let mut oracle = vec![0.0; m * m];
        for k in 0..n {
            let d2 = b.derivative((k as f64 + 0.5) * h, 2);
            for i in 0..m {
                for j in 0..m {
                    oracle[i * m + j] += h * d2[i] * d2[j];
                }
            }
        }
        for (a, o) in s.iter().zip(&oracle) {
            assert!((a - o).abs() < 1e-4 * (1.0 + o.abs()));
        }
    }

    #[test]
    fn tensor_helpers() {
        let r = tensor_row(&[0.25, 0.75], &[0.5, 0.5]);
        assert_eq!(r, vec![0.125, 0.125, 0.375, 0.375]);
        let sa = [1.0, 0.0, 0.0, 2.0];
        let sb = [3.0, 0.0, 0.0, 4.0];
        let s = tensor_penalty(&sa, 2, &sb, 2);
        assert_eq!(s[0], 4.0);
        assert_eq!(s[5], 5.0);
        assert_eq!(s[10], 5.0);
        assert_eq!(s[15], 6.0);
    }
}
