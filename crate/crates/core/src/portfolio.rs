//! Constrained mean-variance portfolios and the six-variant rolling backtest.
//!
//! Each day the optimizer solves
//!
//! ```text
//! max  mu'w - (lambda / 2) w' Sigma w
//! s.t. 0 <= w_i <= 3 / N,  sum w <= 1
//! ```
//!
//! with the remainder held in cash at a zero return.

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Risk aversion used when the market return on the day is not positive.
pub const LAMBDA_FLOOR: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct MvProblem {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub lambda: f64,
    pub cap: f64,
}

impl MvProblem {
    /// Problem with the default per-asset cap of `3 / N`.
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>, lambda: f64) -> Self {
        let cap = 3.0 / mu.len() as f64;
        Self { mu, sigma, lambda, cap }
    }

    /// `mu'w - lambda/2 w' Sigma w`.
    pub fn objective(&self, w: &[f64]) -> f64 {
        let n = w.len();
        let mut quad = 0.0;
        for i in 0..n {
            for j in 0..n {
                quad += w[i] * self.sigma[(i, j)] * w[j];
            }
        }
        let lin: f64 = (0..n).map(|i| self.mu[i] * w[i]).sum();
        lin - 0.5 * self.lambda * quad
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MvSolution {
    pub weights: Vec<f64>,
    pub cash: f64,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Lower,
    Upper,
    Free,
}

fn validate(p: &MvProblem) -> Result<()> {
    let n = p.mu.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty problem".into()));
    }
    if p.sigma.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "mu has {n} entries but Sigma is {}x{}",
            p.sigma.nrows(),
            p.sigma.ncols()
        )));
    }
    if !(p.lambda > 0.0) || !p.lambda.is_finite() {
        return Err(Error::Domain(format!("lambda must be positive, got {}", p.lambda)));
    }
    if !(p.cap > 0.0) || !p.cap.is_finite() {
        return Err(Error::Domain(format!("cap must be positive, got {}", p.cap)));
    }
    if p.mu.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("mu has non-finite entries".into()));
    }
    linalg::check_finite(&p.sigma, "Sigma")?;
    linalg::check_symmetric(&p.sigma, "Sigma")?;
    let eig = linalg::sorted_eigen(&p.sigma);
    let top = eig.values[0].abs();
    let min = eig.values[n - 1];
    if min < -linalg::PSD_TOL * top.max(f64::MIN_POSITIVE) {
        return Err(Error::NotPsd {
            name: "Sigma".into(),
            min_eigenvalue: min,
        });
    }
    Ok(())
}

/// Search direction within the face defined by the working set.
/// Returns `(d, newton)`; `newton` is false for a zero-curvature descent ray.
fn face_direction(h: &DMatrix<f64>, g: &[f64], free: &[usize], budget: bool, tol_curv: f64, tol_grad: f64) -> (Vec<f64>, bool) {
    let k = free.len();
    let dim = if budget { k.saturating_sub(1) } else { k };
    if dim == 0 {
        return (vec![0.0; k], true);
    }
    // Basis of the face: identity, or [I; -1'] when the budget binds.
    let z = DMatrix::from_fn(k, dim, |r, c| {
        if r == c {
            1.0
        } else if budget && r == k - 1 {
            -1.0
        } else {
            0.0
        }
    });
    let hff = DMatrix::from_fn(k, k, |r, c| h[(free[r], free[c])]);
    let gf = DVector::from_fn(k, |r, _| g[free[r]]);
    let m = z.transpose() * &hff * &z;
    let r = z.transpose() * gf;
    let eig = linalg::sorted_eigen(&m);
    let mut ray = DVector::zeros(dim);
    let mut newton = DVector::zeros(dim);
    let mut has_ray = false;
    for (idx, &lam) in eig.values.iter().enumerate() {
        let v = eig.vectors.column(idx);
        let proj = v.dot(&r);
        if lam <= tol_curv {
            if proj.abs() > tol_grad {
                ray -= v * proj;
                has_ray = true;
            }
        } else {
            newton -= v * (proj / lam);
        }
    }
    let y = if has_ray { ray } else { newton };
    let d = z * y;
    (d.iter().copied().collect(), !has_ray)
}

/// Solve the box-and-budget constrained mean-variance problem with a primal
/// active-set method started from all cash.
pub fn solve_mv(p: &MvProblem) -> Result<MvSolution> {
    validate(p)?;
    let n = p.mu.len();
    let h = &p.sigma * p.lambda;
    let cap = p.cap;
    let scale = p.mu.amax().max(h.amax()).max(f64::MIN_POSITIVE);
    let tol_curv = 1e-12 * h.amax().max(f64::MIN_POSITIVE);
    let tol_grad = 1e-14 * scale;
    let tol_mult = 1e-12 * scale;
    let max_iter = 100 * (n + 1);

    let mut w = vec![0.0; n];
    let mut status = vec![Status::Lower; n];
    let mut budget = false;
    let mut at_face_min = false;
    let mut g = vec![0.0; n];
    for iter in 0..max_iter {
        for i in 0..n {
            g[i] = (0..n).map(|j| h[(i, j)] * w[j]).sum::<f64>() - p.mu[i];
        }
        let free: Vec<usize> = (0..n).filter(|&i| status[i] == Status::Free).collect();
        if budget && free.is_empty() {
            // Budget is implied by the bounds here; keep the working set independent.
            budget = false;
        }
        let (d, newton) = if at_face_min {
            (vec![0.0; free.len()], true)
        } else {
            face_direction(&h, &g, &free, budget, tol_curv, tol_grad)
        };
        let step_norm = d.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if step_norm <= 1e-13 {
            at_face_min = false;
            // Multipliers: free g_i + nu = 0; lower g_i + nu >= 0; upper -(g_i + nu) >= 0.
            let nu = if budget {
                -free.iter().map(|&i| g[i]).sum::<f64>() / free.len() as f64
            } else {
                0.0
            };
            let mut worst: Option<(f64, Option<usize>)> = None;
            for i in 0..n {
                let m = match status[i] {
                    Status::Lower => g[i] + nu,
                    Status::Upper => -(g[i] + nu),
                    Status::Free => continue,
                };
                if m < -tol_mult && worst.is_none_or(|(v, _)| m < v) {
                    worst = Some((m, Some(i)));
                }
            }
            if budget && nu < -tol_mult && worst.is_none_or(|(v, _)| nu < v) {
                worst = Some((nu, None));
            }
            match worst {
                None => return Ok(finish(p, w, &status, iter)),
                Some((_, Some(i))) => status[i] = Status::Free,
                Some((_, None)) => budget = false,
            }
            continue;
        }

        // Ratio test along d.
        let mut alpha = if newton { 1.0 } else { f64::INFINITY };
        let mut blocking: Option<(usize, Status)> = None;
        let mut budget_blocks = false;
        for (k, &i) in free.iter().enumerate() {
            let (ratio, bound) = if d[k] < 0.0 {
                (w[i] / -d[k], Status::Lower)
            } else if d[k] > 0.0 {
                ((cap - w[i]) / d[k], Status::Upper)
            } else {
                continue;
            };
            let ratio = ratio.max(0.0);
            if ratio < alpha {
                alpha = ratio;
                blocking = Some((i, bound));
                budget_blocks = false;
            }
        }
        if !budget {
            let slope: f64 = d.iter().sum();
            if slope > 0.0 {
                let room = (1.0 - w.iter().sum::<f64>()).max(0.0);
                let ratio = room / slope;
                if ratio < alpha {
                    alpha = ratio;
                    blocking = None;
                    budget_blocks = true;
                }
            }
        }
        if !alpha.is_finite() {
            return Err(Error::Optimizer("unbounded search direction".into()));
        }
        for (k, &i) in free.iter().enumerate() {
            w[i] += alpha * d[k];
        }
        if budget_blocks {
            budget = true;
        } else if let Some((i, bound)) = blocking {
            status[i] = bound;
            w[i] = if bound == Status::Lower { 0.0 } else { cap };
        } else {
            at_face_min = true;
        }
    }
    Err(Error::Optimizer(format!("active set did not settle within {max_iter} iterations")))
}

fn finish(p: &MvProblem, mut w: Vec<f64>, status: &[Status], iterations: usize) -> MvSolution {
    for (i, s) in status.iter().enumerate() {
        w[i] = match s {
            Status::Lower => 0.0,
            Status::Upper => p.cap,
            Status::Free => w[i].clamp(0.0, p.cap),
        };
    }
    let total: f64 = w.iter().sum();
    if total > 1.0 {
        // Round-off on the budget face: take the excess from the largest free weight.
        let excess = total - 1.0;
        if let Some(i) = (0..w.len())
            .filter(|&i| status[i] == Status::Free)
            .max_by(|&a, &b| w[a].total_cmp(&w[b]))
        {
            w[i] = (w[i] - excess).max(0.0);
        }
    }
    let cash = (1.0 - w.iter().sum::<f64>()).max(0.0);
    MvSolution {
        objective: p.objective(&w),
        weights: w,
        cash,
        iterations,
    }
}

/// `r_mkt / sigma^2_mkt`, floored at [`LAMBDA_FLOOR`] when not positive.
pub fn lambda_from(r_mkt: f64, variance: f64) -> Result<f64> {
    if !(variance > 0.0) {
        return Err(Error::Domain(format!("market variance must be positive, got {variance}")));
    }
    let lambda = r_mkt / variance;
    Ok(if lambda > 0.0 { lambda } else { LAMBDA_FLOOR })
}

/// Risk aversion from a window of market returns whose last entry is today's.
pub fn risk_aversion(window_market_returns: &[f64]) -> Result<f64> {
    let n = window_market_returns.len();
    if n < 2 {
        return Err(Error::InsufficientData("risk aversion needs at least 2 market returns".into()));
    }
    lambda_from(window_market_returns[n - 1], sample_variance(window_market_returns))
}

pub fn sample_variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SharpeRatio {
    pub value: f64,
    pub mean: f64,
    pub std: f64,
    /// Zero standard deviation; `value` is +inf, -inf or NaN by the sign of the mean.
    pub degenerate: bool,
}

pub fn sharpe_annualized(daily_returns: &[f64], periods_per_year: f64) -> Result<SharpeRatio> {
    if daily_returns.len() < 2 {
        return Err(Error::InsufficientData("Sharpe ratio needs at least 2 returns".into()));
    }
    let n = daily_returns.len() as f64;
    let mean = daily_returns.iter().sum::<f64>() / n;
    let constant = daily_returns.iter().all(|&r| r == daily_returns[0]);
    let std = if constant { 0.0 } else { sample_variance(daily_returns).sqrt() };
    if std == 0.0 {
        let value = if mean > 0.0 {
            f64::INFINITY
        } else if mean < 0.0 {
            f64::NEG_INFINITY
        } else {
            f64::NAN
        };
        return Ok(SharpeRatio { value, mean, std, degenerate: true });
    }
    Ok(SharpeRatio {
        value: (mean * periods_per_year) / (std * periods_per_year.sqrt()),
        mean,
        std,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReturnSource {
    RegularMean,
    LiqAdjustedMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovSource {
    RollingWindow,
    Intraday,
    Posterior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct PortfolioVariant {
    pub id: u8,
    pub return_source: ReturnSource,
    pub cov_source: CovSource,
}

impl PortfolioVariant {
    /// Variants 1..6: odd ids use regular inputs, even ids liquidity-adjusted.
    pub fn from_id(id: u8) -> Result<Self> {
        let cov_source = match id {
            1 | 2 => CovSource::RollingWindow,
            3 | 4 => CovSource::Intraday,
            5 | 6 => CovSource::Posterior,
            _ => return Err(Error::Config(format!("portfolio variant must be 1..6, got {id}"))),
        };
        let return_source = if id % 2 == 1 {
            ReturnSource::RegularMean
        } else {
            ReturnSource::LiqAdjustedMean
        };
        Ok(Self { id, return_source, cov_source })
    }

    pub fn all() -> Vec<Self> {
        (1..=6).map(|i| Self::from_id(i).expect("valid id")).collect()
    }

    pub fn is_adjusted(&self) -> bool {
        self.return_source == ReturnSource::LiqAdjustedMean
    }

    pub fn family(&self) -> &'static str {
        if self.is_adjusted() {
            "LAMV"
        } else {
            "TMV"
        }
    }
}

/// Inputs for the backtest, one row/entry per day.
#[derive(Debug, Clone)]
pub struct BacktestData {
    pub dates: Vec<NaiveDate>,
    /// `D x N` regular daily returns.
    pub regular: DMatrix<f64>,
    /// `D x N` liquidity-adjusted daily returns.
    pub adjusted: DMatrix<f64>,
    /// Same-day intraday covariances.
    pub intraday: Vec<DMatrix<f64>>,
    pub intraday_liq: Vec<DMatrix<f64>>,
    /// Posterior covariance forecast made at the close of each day (for the
    /// next day); `None` where the chain failed or was not run.
    pub posterior: Vec<Option<DMatrix<f64>>>,
    pub posterior_liq: Vec<Option<DMatrix<f64>>>,
}

impl BacktestData {
    pub fn days(&self) -> usize {
        self.dates.len()
    }

    pub fn assets(&self) -> usize {
        self.regular.ncols()
    }

    fn validate(&self) -> Result<()> {
        let d = self.days();
        let n = self.assets();
        let ok = self.regular.shape() == (d, n)
            && self.adjusted.shape() == (d, n)
            && self.intraday.len() == d
            && self.intraday_liq.len() == d
            && self.posterior.len() == d
            && self.posterior_liq.len() == d;
        if !ok {
            return Err(Error::Dimension("backtest inputs disagree on days or assets".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BacktestResult {
    pub variant: PortfolioVariant,
    /// Day on which each weight vector was formed.
    pub formation_dates: Vec<NaiveDate>,
    /// Day on which each return was realized.
    pub dates: Vec<NaiveDate>,
    /// `N` risky weights followed by cash.
    pub weights: Vec<Vec<f64>>,
    pub realized: Vec<f64>,
    pub sharpe: SharpeRatio,
    /// Days whose optimization failed and which carried the previous weights.
    pub failed_days: Vec<NaiveDate>,
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.ncols(), |c, _| m.column(c).mean())
}

fn weights_for_day(data: &BacktestData, variant: PortfolioVariant, t: usize, window: usize) -> Result<Vec<f64>> {
    let start = t + 1 - window;
    let src = match variant.return_source {
        ReturnSource::RegularMean => &data.regular,
        ReturnSource::LiqAdjustedMean => &data.adjusted,
    };
    let block = src.rows(start, window).into_owned();
    let mu = column_means(&block);
    let sigma = match variant.cov_source {
        CovSource::RollingWindow => linalg::row_covariance(&block, true).1,
        CovSource::Intraday => {
            if variant.is_adjusted() {
                data.intraday_liq[t].clone()
            } else {
                data.intraday[t].clone()
            }
        }
        CovSource::Posterior => {
            let slot = if variant.is_adjusted() {
                &data.posterior_liq[t]
            } else {
                &data.posterior[t]
            };
            slot.clone()
                .ok_or_else(|| Error::InsufficientData(format!("no posterior forecast on {}", data.dates[t])))?
        }
    };
    let (sigma, _) = linalg::clip_psd(&linalg::symmetrize(&sigma));
    let market: Vec<f64> = (start..=t).map(|r| data.regular.row(r).mean()).collect();
    let lambda = match risk_aversion(&market) {
        Ok(l) => l,
        Err(Error::Domain(_)) => {
            log::warn!("{}: market variance is zero; using lambda floor", data.dates[t]);
            LAMBDA_FLOOR
        }
        Err(e) => return Err(e),
    };
    let sol = solve_mv(&MvProblem::new(mu, sigma, lambda))?;
    let mut w = sol.weights;
    w.push(sol.cash);
    Ok(w)
}

fn run_variant(data: &BacktestData, variant: PortfolioVariant, window: usize, periods_per_year: f64) -> Result<BacktestResult> {
    let n = data.assets();
    let mut prev: Vec<f64> = {
        let mut w = vec![0.0; n];
        w.push(1.0);
        w
    };
    let mut out = BacktestResult {
        variant,
        formation_dates: Vec::new(),
        dates: Vec::new(),
        weights: Vec::new(),
        realized: Vec::new(),
        sharpe: SharpeRatio { value: f64::NAN, mean: f64::NAN, std: f64::NAN, degenerate: true },
        failed_days: Vec::new(),
    };
    for t in (window - 1)..(data.days() - 1) {
        let w = match weights_for_day(data, variant, t, window) {
            Ok(w) => w,
            Err(e) => {
                log::warn!("variant {} on {}: {e}; keeping previous weights", variant.id, data.dates[t]);
                out.failed_days.push(data.dates[t]);
                prev.clone()
            }
        };
        let realized: f64 = (0..n).map(|i| w[i] * data.regular[(t + 1, i)]).sum();
        out.formation_dates.push(data.dates[t]);
        out.dates.push(data.dates[t + 1]);
        out.realized.push(realized);
        prev = w.clone();
        out.weights.push(w);
    }
    out.sharpe = sharpe_annualized(&out.realized, periods_per_year)?;
    Ok(out)
}

/// Run the selected variants over every out-of-sample day: weights formed at
/// the close of day `t` from the trailing `window` days, realized with the
/// regular returns of day `t + 1`.
pub fn run_backtest(
    data: &BacktestData,
    variants: &[PortfolioVariant],
    window: usize,
    periods_per_year: f64,
) -> Result<Vec<BacktestResult>> {
    data.validate()?;
    if window < 2 || window + 2 > data.days() {
        return Err(Error::InsufficientData(format!(
            "window of {window} days needs at least {} days of data, got {}",
            window + 2,
            data.days()
        )));
    }
    variants
        .par_iter()
        .map(|&v| run_variant(data, v, window, periods_per_year))
        .collect()
}
