//! Online aggregation of expert forecasts with ML-Poly on linearized
//! square losses, mid-stream admission of experts, and the expert that
//! treats every day as a Saturday.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::SATURDAY;
use crate::gam::{FittedGam, GamError};
use crate::table::{col, TimeTable};

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error("no active expert at step {0}")]
    NoActiveExpert(usize),
    #[error("expert `{0}` is already in the mixture")]
    DuplicateExpert(String),
    #[error("expert `{0}` is active but its forecast at step {1} is not finite")]
    NonFiniteForecast(String, usize),
    #[error("expected {expected} forecasts, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("uniform share {0} leaves no mass for the existing experts")]
    InvalidShare(f64),
    #[error(transparent)]
    Gam(#[from] GamError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Regrets, learning rates and weights of an ML-Poly mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureState {
    pub names: Vec<String>,
    pub active: Vec<bool>,
    /// Cumulative regret `R_j`.
    pub regret: Vec<f64>,
    /// `Σ r_j²`, so that `η_j = 1/(1 + Σ r_j²)`.
    pub regret_sq: Vec<f64>,
    /// Weights used for the next forecast; zero for inactive experts.
    pub weights: Vec<f64>,
    pub t: usize,
}

impl MixtureState {
    /// Mixture over `names`, all active with uniform weights.
    pub fn new(names: &[String]) -> Self {
        let n = names.len();
        Self {
            names: names.to_vec(),
            active: vec![true; n],
            regret: vec![0.0; n],
            regret_sq: vec![0.0; n],
            weights: vec![1.0 / n as f64; n],
            t: 0,
        }
    }

    /// Mixture over `names` where only `active` experts start with weight.
    pub fn with_active(names: &[String], active: &[bool]) -> Self {
        let mut s = Self::new(names);
        s.active = active.to_vec();
        s.reset_uniform();
        s
    }

    fn reset_uniform(&mut self) {
        let k = self.active.iter().filter(|&&a| a).count();
        for (w, &a) in self.weights.iter_mut().zip(&self.active) {
            *w = if a && k > 0 { 1.0 / k as f64 } else { 0.0 };
        }
    }

    pub fn learning_rate(&self, j: usize) -> f64 {
        1.0 / (1.0 + self.regret_sq[j])
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// `Σ p_j ŷ_j` over active experts.
    pub fn forecast(&self, expert_forecasts: &[f64]) -> Result<f64, AggregateError> {
        if expert_forecasts.len() != self.names.len() {
            return Err(AggregateError::DimensionMismatch { expected: self.names.len(), got: expert_forecasts.len() });
        }
        if !self.active.iter().any(|&a| a) {
            return Err(AggregateError::NoActiveExpert(self.t));
        }
        let mut out = 0.0;
        for j in 0..self.names.len() {
            if self.active[j] {
                if !expert_forecasts[j].is_finite() {
                    return Err(AggregateError::NonFiniteForecast(self.names[j].clone(), self.t));
                }
                out += self.weights[j] * expert_forecasts[j];
            }
        }
        Ok(out)
    }
}

/// Forecasts with the current weights, then, if `y` is finite, updates the
/// regrets with `r_j = 2(ŷ − y)(ŷ − ŷ_j)`, the learning rates, and the
/// weights `p_j ∝ η_j (R_j)₊` (uniform over active experts when all
/// positive parts vanish).
pub fn mlpoly_update(state: &MixtureState, expert_forecasts: &[f64], y: f64) -> Result<(f64, MixtureState), AggregateError> {
    let yhat = state.forecast(expert_forecasts)?;
    let mut next = state.clone();
    next.t += 1;
    if !y.is_finite() {
        return Ok((yhat, next));
    }
    let grad = 2.0 * (yhat - y);
    for j in 0..next.names.len() {
        if next.active[j] {
            let r = grad * (yhat - expert_forecasts[j]);
            next.regret[j] += r;
            next.regret_sq[j] += r * r;
        }
    }
    let raw: Vec<f64> = (0..next.names.len())
        .map(|j| if next.active[j] { next.learning_rate(j) * next.regret[j].max(0.0) } else { 0.0 })
        .collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 && total.is_finite() {
        next.weights = raw.iter().map(|w| w / total).collect();
    } else {
        next.reset_uniform();
    }
    Ok((yhat, next))
}

/// Adds experts with `uniform_share` of the mass each; existing experts
/// keep their relative weights on the remaining mass. Admitted experts
/// start with zero regret and a fresh learning rate. Names already known
/// but inactive are activated in place.
pub fn admit_experts(state: &MixtureState, new_experts: &[String], uniform_share: f64) -> Result<MixtureState, AggregateError> {
    let mut next = state.clone();
    if new_experts.is_empty() {
        return Ok(next);
    }
    let k = new_experts.len() as f64;
    let had_active = next.active.iter().any(|&a| a);
    let share = if had_active { uniform_share } else { 1.0 / k };
    let rest = 1.0 - k * share;
    if !(share > 0.0) || rest < -1e-15 {
        return Err(AggregateError::InvalidShare(uniform_share));
    }
    let rest = rest.max(0.0);
    for w in next.weights.iter_mut() {
        *w *= rest;
    }
    for (i, name) in new_experts.iter().enumerate() {
        if new_experts[..i].contains(name) {
            return Err(AggregateError::DuplicateExpert(name.clone()));
        }
        let j = match next.index(name) {
            Some(j) if next.active[j] => return Err(AggregateError::DuplicateExpert(name.clone())),
            Some(j) => j,
            None => {
                next.names.push(name.clone());
                next.active.push(false);
                next.regret.push(0.0);
                next.regret_sq.push(0.0);
                next.weights.push(0.0);
                next.names.len() - 1
            }
        };
        next.active[j] = true;
        next.regret[j] = 0.0;
        next.regret_sq[j] = 0.0;
        next.weights[j] = share;
    }
    Ok(next)
}

/// Forecast streams of several experts over a common time axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPanel {
    pub names: Vec<String>,
    /// `forecasts[j][t]`.
    pub forecasts: Vec<Vec<f64>>,
    /// First active step of each expert.
    pub active_from: Vec<usize>,
    /// Loss-range scale, for diagnostics only.
    pub bound: f64,
}

/// Output of [`run_panel`].
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureRun {
    pub forecasts: Vec<f64>,
    /// `weights[t][j]`, the weights used at step `t`.
    pub weights: Vec<Vec<f64>>,
    pub state: MixtureState,
}

impl ExpertPanel {
    pub fn len(&self) -> usize {
        self.forecasts.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Runs ML-Poly over the panel. Experts whose `active_from` is after the
/// first step are admitted at that step with share `1/N` each, `N` being
/// the panel size. Steps where an active expert has no finite forecast
/// get a NaN forecast and leave the mixture unchanged.
pub fn run_panel(panel: &ExpertPanel, y: &[f64]) -> Result<MixtureRun, AggregateError> {
    let n = panel.names.len();
    if panel.forecasts.len() != n || panel.active_from.len() != n {
        return Err(AggregateError::DimensionMismatch { expected: n, got: panel.forecasts.len() });
    }
    let len = y.len();
    for f in &panel.forecasts {
        if f.len() != len {
            return Err(AggregateError::DimensionMismatch { expected: len, got: f.len() });
        }
    }
    let initial: Vec<bool> = panel.active_from.iter().map(|&a| a == 0).collect();
    let mut state = MixtureState::with_active(&panel.names, &initial);
    let share = 1.0 / n as f64;
    let mut out = MixtureRun { forecasts: Vec::with_capacity(len), weights: Vec::with_capacity(len), state: state.clone() };
    let mut row = vec![0.0; n];
    for t in 0..len {
        let admitted: Vec<String> = (0..n).filter(|&j| t > 0 && panel.active_from[j] == t).map(|j| panel.names[j].clone()).collect();
        if !admitted.is_empty() {
            state = admit_experts(&state, &admitted, share)?;
        }
        for j in 0..n {
            row[j] = if state.active[j] { panel.forecasts[j][t] } else { 0.0 };
        }
        out.weights.push(state.weights.clone());
        if (0..n).any(|j| state.active[j] && !row[j].is_finite()) {
            out.forecasts.push(f64::NAN);
            continue;
        }
        let (yhat, next) = mlpoly_update(&state, &row, y[t])?;
        out.forecasts.push(yhat);
        state = next;
    }
    out.state = state;
    Ok(out)
}

impl MixtureRun {
    /// Long-format CSV `t, expert, weight`.
    pub fn write_weights_csv<W: Write>(&self, names: &[String], w: W) -> Result<(), AggregateError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "expert", "weight"])?;
        for (t, ws) in self.weights.iter().enumerate() {
            for (name, v) in names.iter().zip(ws) {
                out.write_record([t.to_string(), name.clone(), v.to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// `rows` with every day type replaced by Saturday.
pub fn as_saturday(rows: &TimeTable) -> Result<TimeTable, GamError> {
    let mut sat = rows.clone();
    sat.set_column(col::DAY_TYPE, vec![SATURDAY; rows.len()])?;
    Ok(sat)
}

/// Forecasts of the regular model as if every day were a Saturday; all
/// other covariates, including the lags, are untouched.
pub fn saturday_expert(model: &FittedGam, rows: &TimeTable) -> Result<Vec<f64>, GamError> {
    model.predict(&as_saturday(rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("e{i}")).collect()
    }

    fn simplex(w: &[f64], active: &[bool]) {
        let s: f64 = w.iter().sum();
        assert!((s - 1.0).abs() <= 1e-12, "{s}");
        for (v, a) in w.iter().zip(active) {
            assert!(*v >= 0.0);
            if !a {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn uniform_start_and_symmetry() {
        let s = MixtureState::new(&names(2));
        assert_eq!(s.weights, vec![0.5, 0.5]);
        let mut s = MixtureState::new(&names(3));
        for t in 0..100 {
            let f = 10.0 + (t as f64).sin();
            let (_, next) = mlpoly_update(&s, &[f, f, f], 10.0).unwrap();
            s = next;
            assert!(s.weights.iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn perfect_expert_dominates() {
        let mut s = MixtureState::new(&names(2));
        for t in 0..50 {
            let y = 1000.0 + 50.0 * (t as f64 * 0.3).sin();
            let (_, next) = mlpoly_update(&s, &[y, y + 100.0], y).unwrap();
            s = next;
            simplex(&s.weights, &s.active);
        }
        assert!(s.weights[0] > 0.95);
    }

    #[test]
    fn admission_examples() {
        let mut s = MixtureState::new(&names(2));
        s.weights = vec![0.6, 0.4];
        let added: Vec<String> = (0..10).map(|i| format!("new{i}")).collect();
        let a = admit_experts(&s, &added, 1.0 / 12.0).unwrap();
        assert!((a.weights[0] - 0.1).abs() < 1e-15);
        assert!((a.weights[1] - 0.4 / 6.0).abs() < 1e-15);
        assert!(a.weights[2..].iter().all(|&w| w == 1.0 / 12.0));
        simplex(&a.weights, &a.active);
        assert!(a.regret[2..].iter().all(|&r| r == 0.0));
        assert_eq!(admit_experts(&s, &[], 1.0 / 12.0).unwrap(), s);

        let one = MixtureState::new(&names(1));
        let added: Vec<String> = (0..11).map(|i| format!("x{i}")).collect();
        let b = admit_experts(&one, &added, 1.0 / 12.0).unwrap();
        assert!((b.weights[0] - 1.0 / 12.0).abs() < 1e-15);
        simplex(&b.weights, &b.active);
        assert!(matches!(admit_experts(&b, &["x3".to_string()], 0.1), Err(AggregateError::DuplicateExpert(_))));
    }

    #[test]
    fn panel_with_late_experts_keeps_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = Normal::new(0.0, 30.0).unwrap();
        let t_len = 300;
        let y: Vec<f64> = (0..t_len).map(|t| 1000.0 + 100.0 * (t as f64 / 7.0).sin()).collect();
        let mut forecasts = Vec::new();
        for j in 0..12 {
            forecasts.push(y.iter().map(|v| v + noise.sample(&mut rng) * (1.0 + j as f64 / 4.0) + j as f64).collect());
        }
        let active_from: Vec<usize> = (0..12).map(|j| if j < 2 { 0 } else { 150 }).collect();
        let panel = ExpertPanel { names: names(12), forecasts, active_from, bound: 1200.0 };
        let run = run_panel(&panel, &y).unwrap();
        for (t, w) in run.weights.iter().enumerate() {
            let active: Vec<bool> = panel.active_from.iter().map(|&a| a <= t).collect();
            simplex(w, &active);
        }
        assert!(run.weights[150][2..].iter().all(|&w| w == 1.0 / 12.0));
        let mut buf = Vec::new();
        run.write_weights_csv(&panel.names, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 12 * t_len);
    }

    #[test]
    fn missing_forecasts_skip_the_step() {
        let y = vec![10.0, 11.0, 12.0, 13.0];
        let forecasts = vec![vec![10.0, f64::NAN, 12.0, 13.0], vec![9.0, 10.0, 11.0, 12.0]];
        let panel = ExpertPanel { names: names(2), forecasts, active_from: vec![0, 0], bound: 10.0 };
        let run = run_panel(&panel, &y).unwrap();
        assert!(run.forecasts[1].is_nan());
        assert!(run.forecasts[2].is_finite());
        assert_eq!(run.weights[1], run.weights[2]);
        assert!(run.weights[3][0] > run.weights[3][1]);
    }

    #[test]
    fn mixture_regret_slope_is_not_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t_len = 5000;
        let y: Vec<f64> = (0..t_len).map(|t| 500.0 + 80.0 * (t as f64 / 24.0).sin()).collect();
        let sds = [20.0, 35.0, 50.0];
        let biases = [15.0, -5.0, 0.0];
        let forecasts: Vec<Vec<f64>> = sds
            .iter()
            .zip(&biases)
            .map(|(&sd, &b)| {
                let n = Normal::new(b, sd).unwrap();
                y.iter().map(|v| v + n.sample(&mut rng)).collect()
            })
            .collect();
        let panel = ExpertPanel { names: names(3), forecasts: forecasts.clone(), active_from: vec![0; 3], bound: 700.0 };
        let run = run_panel(&panel, &y).unwrap();
        let mut cum_mix = 0.0;
        let mut cum = [0.0; 3];
        let mut diff = Vec::new();
        for t in 0..t_len {
            cum_mix += (run.forecasts[t] - y[t]).powi(2);
            for j in 0..3 {
                cum[j] += (forecasts[j][t] - y[t]).powi(2);
            }
            diff.push(cum_mix - cum.iter().cloned().fold(f64::INFINITY, f64::min));
        }
        // Least-squares slope of the cumulative excess loss over the last half.
        let half = t_len / 2;
        let xs: Vec<f64> = (half..t_len).map(|t| t as f64).collect();
        let ys = &diff[half..];
        let mx = xs.iter().sum::<f64>() / xs.len() as f64;
        let my = ys.iter().sum::<f64>() / ys.len() as f64;
        let slope = xs.iter().zip(ys).map(|(x, v)| (x - mx) * (v - my)).sum::<f64>()
            / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        let best_per_round = cum.iter().cloned().fold(f64::INFINITY, f64::min) / t_len as f64;
        assert!(slope <= 0.01 * best_per_round, "slope {slope}, per-round {best_per_round}");
    }

    #[test]
    fn removing_the_exact_expert_hurts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = Normal::new(0.0, 10.0).unwrap();
        let y: Vec<f64> = (0..200).map(|t| 100.0 + (t as f64).cos() * 10.0).collect();
        let noisy: Vec<f64> = y.iter().map(|v| v + n.sample(&mut rng)).collect();
        let biased: Vec<f64> = y.iter().map(|v| v + 5.0).collect();
        let loss = |p: &ExpertPanel| {
            let r = run_panel(p, &y).unwrap();
            r.forecasts.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        };
        let with = ExpertPanel { names: names(3), forecasts: vec![y.clone(), noisy.clone(), biased.clone()], active_from: vec![0; 3], bound: 200.0 };
        let without = ExpertPanel { names: names(2), forecasts: vec![noisy, biased], active_from: vec![0; 2], bound: 200.0 };
        assert!(loss(&without) > loss(&with));
    }

    #[test]
    fn errors() {
        let mut s = MixtureState::new(&names(2));
        assert!(matches!(mlpoly_update(&s, &[1.0, f64::NAN], 1.0), Err(AggregateError::NonFiniteForecast(..))));
        s.active = vec![false, false];
        assert!(matches!(mlpoly_update(&s, &[1.0, 1.0], 1.0), Err(AggregateError::NoActiveExpert(0))));
    }
}
