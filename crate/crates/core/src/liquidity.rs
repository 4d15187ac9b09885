//! Asset-level liquidity adjustment and the portfolio liquidity matrices.
//!
//! A minute's return is rescaled by how large it is relative to the dollar
//! amount that traded in that minute:
//!
//! ```text
//! w_tau  = eta * (|r_tau| / mean|r|) / (A_tau / mean A)
//! r^l    = sqrt(w_tau) * r_tau
//! ```
//!
//! with `eta` chosen so the weights sum to the number of traded minutes.

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::condsvd::{self, CondSvdResult};
use crate::error::{Error, Result};
use crate::linalg;
use crate::marketdata::{daily_compound_return, MinuteGrid};

/// Default cap for reported determinants.
pub const DETERMINANT_CAP: f64 = 10.0;

/// Per-minute ratio `(|r| / mean|r|) / (A / mean A)` over traded minutes
/// (`A > 0`); untraded minutes get `None`.
fn minute_ratios(returns: &[f64], volumes: &[f64]) -> Result<Vec<Option<f64>>> {
    if returns.len() != volumes.len() {
        return Err(Error::Dimension(format!(
            "{} returns but {} volumes",
            returns.len(),
            volumes.len()
        )));
    }
    if returns.is_empty() {
        return Err(Error::InvalidInput("empty minute series".into()));
    }
    if let Some(v) = volumes.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidInput(format!("invalid dollar volume {v}")));
    }
    let traded: Vec<usize> = (0..volumes.len()).filter(|&i| volumes[i] > 0.0).collect();
    if traded.is_empty() {
        return Err(Error::DegenerateDay("no minute has positive dollar volume".into()));
    }
    let k = traded.len() as f64;
    let mean_abs_r = traded.iter().map(|&i| returns[i].abs()).sum::<f64>() / k;
    let mean_a = traded.iter().map(|&i| volumes[i]).sum::<f64>() / k;
    if !(mean_abs_r > 0.0) {
        return Err(Error::DegenerateDay("all traded minute returns are zero".into()));
    }
    let mut out = vec![None; returns.len()];
    for &i in &traded {
        out[i] = Some((returns[i].abs() / mean_abs_r) / (volumes[i] / mean_a));
    }
    Ok(out)
}

/// Daily normalization factor `eta`, making `sum(eta * ratio)` equal to the
/// number of traded minutes (which is `T` on a fully traded day).
pub fn normalization_factor(returns: &[f64], volumes: &[f64]) -> Result<f64> {
    let ratios = minute_ratios(returns, volumes)?;
    Ok(eta_from_ratios(&ratios))
}

fn eta_from_ratios(ratios: &[Option<f64>]) -> f64 {
    let (count, sum) = ratios
        .iter()
        .flatten()
        .fold((0usize, 0.0), |(c, s), r| (c + 1, s + r));
    count as f64 / sum
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjustedMinutes {
    pub eta: f64,
    /// Liquidity-adjusted minute returns.
    pub returns: Vec<f64>,
    /// Minute-level variance of the adjusted returns (population form).
    pub minute_variance: f64,
}

impl AdjustedMinutes {
    pub fn daily_variance(&self) -> f64 {
        self.returns.len() as f64 * self.minute_variance
    }

    pub fn daily_vol(&self) -> f64 {
        self.daily_variance().sqrt()
    }
}

pub fn population_variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Liquidity-adjusted minute returns and their minute-level variance.
/// Untraded minutes keep their original return.
pub fn liquidity_adjusted_minutes(returns: &[f64], volumes: &[f64]) -> Result<AdjustedMinutes> {
    let ratios = minute_ratios(returns, volumes)?;
    let eta = eta_from_ratios(&ratios);
    let adjusted: Vec<f64> = returns
        .iter()
        .zip(&ratios)
        .map(|(&r, ratio)| match ratio {
            Some(q) => (eta * q).sqrt() * r,
            None => r,
        })
        .collect();
    let minute_variance = population_variance(&adjusted);
    Ok(AdjustedMinutes {
        eta,
        returns: adjusted,
        minute_variance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssetDay {
    pub symbol: String,
    pub date: NaiveDate,
    pub daily_return: f64,
    pub daily_liq_return: f64,
    pub daily_vol: f64,
    pub daily_liq_vol: f64,
}

/// An asset-day together with its adjusted minute path.
#[derive(Debug, Clone)]
pub struct AdjustedDay {
    pub day: AssetDay,
    pub adjusted_returns: Vec<f64>,
    /// The adjustment could not be computed (no trades, no price moves, or an
    /// adjusted minute return at or below -100%); adjusted series equal the
    /// regular ones.
    pub adjustment_failed: bool,
}

pub fn adjust_grid(grid: &MinuteGrid) -> Result<AdjustedDay> {
    let t = grid.len() as f64;
    let daily_return = daily_compound_return(&grid.returns)?;
    let daily_vol = (t * population_variance(&grid.returns)).sqrt();
    let attempt = liquidity_adjusted_minutes(&grid.returns, &grid.dollar_volume).and_then(|adj| {
        let liq_return = daily_compound_return(&adj.returns)?;
        Ok((adj, liq_return))
    });
    let (adjusted_returns, daily_liq_return, daily_liq_vol, failed) = match attempt {
        Ok((adj, liq_return)) => {
            let vol = adj.daily_vol();
            (adj.returns, liq_return, vol, false)
        }
        Err(Error::DegenerateDay(_)) | Err(Error::Domain(_)) => {
            log::debug!("{} {}: liquidity adjustment unavailable", grid.symbol, grid.date);
            (grid.returns.clone(), daily_return, daily_vol, true)
        }
        Err(e) => return Err(e),
    };
    Ok(AdjustedDay {
        day: AssetDay {
            symbol: grid.symbol.clone(),
            date: grid.date,
            daily_return,
            daily_liq_return,
            daily_vol,
            daily_liq_vol,
        },
        adjusted_returns,
        adjustment_failed: failed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LiquidityBetas {
    pub jump: f64,
    pub diffusion: f64,
}

impl LiquidityBetas {
    pub const NEUTRAL: LiquidityBetas = LiquidityBetas {
        jump: 1.0,
        diffusion: 1.0,
    };
}

/// `(|r / r^l|, sigma / sigma^l)`; a zero denominator is a degenerate day.
pub fn liquidity_betas(day: &AssetDay) -> Result<LiquidityBetas> {
    if day.daily_liq_return == 0.0 || day.daily_liq_vol == 0.0 {
        return Err(Error::DegenerateDay(format!(
            "{} {}: zero liquidity-adjusted return or volatility",
            day.symbol, day.date
        )));
    }
    let jump = (day.daily_return / day.daily_liq_return).abs();
    let diffusion = day.daily_vol / day.daily_liq_vol;
    if !(jump.is_finite() && diffusion.is_finite()) {
        return Err(Error::DegenerateDay(format!(
            "{} {}: non-finite liquidity beta",
            day.symbol, day.date
        )));
    }
    Ok(LiquidityBetas { jump, diffusion })
}

/// Population covariance of equal-length minute series, scaled by `T`.
pub fn minute_covariance(series: &[&[f64]]) -> Result<DMatrix<f64>> {
    let n = series.len();
    if n == 0 {
        return Err(Error::InvalidInput("no series".into()));
    }
    let t = series[0].len();
    if t == 0 || series.iter().any(|s| s.len() != t) {
        return Err(Error::Dimension("minute series lengths differ or are empty".into()));
    }
    let x = DMatrix::from_fn(t, n, |r, c| series[c][r]);
    let (_, cov) = linalg::row_covariance(&x, false);
    Ok(cov * t as f64)
}

/// Intraday covariance of same-day grids (adjusted or regular minute returns).
pub fn intraday_covariance(grids: &[MinuteGrid], adjusted: bool) -> Result<DMatrix<f64>> {
    check_same_day(grids)?;
    let series: Vec<Vec<f64>> = if adjusted {
        grids
            .iter()
            .map(|g| adjust_grid(g).map(|d| d.adjusted_returns))
            .collect::<Result<_>>()?
    } else {
        grids.iter().map(|g| g.returns.clone()).collect()
    };
    let refs: Vec<&[f64]> = series.iter().map(|s| s.as_slice()).collect();
    minute_covariance(&refs)
}

fn check_same_day(grids: &[MinuteGrid]) -> Result<()> {
    let Some(first) = grids.first() else {
        return Err(Error::InvalidInput("no grids".into()));
    };
    for g in grids {
        if g.date != first.date || g.len() != first.len() {
            return Err(Error::Dimension(format!(
                "grid {} {} (T={}) does not match {} {} (T={})",
                g.symbol,
                g.date,
                g.len(),
                first.symbol,
                first.date,
                first.len()
            )));
        }
    }
    Ok(())
}

/// `diag(beta_r)`.
pub fn jump_matrix(jumps: &[f64]) -> Result<DMatrix<f64>> {
    if let Some(b) = jumps.iter().find(|b| !(**b > 0.0) || !b.is_finite()) {
        return Err(Error::Domain(format!("jump beta must be positive and finite, got {b}")));
    }
    Ok(DMatrix::from_diagonal(&DVector::from_column_slice(jumps)))
}

/// Solve `Sigma = B Sigma^l B^T` for `B` by conditional SVD.
pub fn diffusion_matrix(sigma: &DMatrix<f64>, sigma_liq: &DMatrix<f64>) -> Result<CondSvdResult> {
    let top = linalg::sorted_eigen(sigma_liq).values.first().copied().unwrap_or(0.0);
    if !(top > 0.0) {
        return Err(Error::Singular {
            name: "liquidity-adjusted intraday covariance".into(),
            detail: "every asset direction has zero variance".into(),
        });
    }
    let out = condsvd::conditional_svd(sigma, sigma_liq, None)?;
    if out.regularized {
        log::warn!(
            "liquidity-adjusted intraday covariance: {} of {} eigen-directions below floor {:e}",
            out.floored_directions,
            sigma.nrows(),
            out.floor_used
        );
    }
    Ok(out)
}

/// `B_sigma * B_r^{-1/2}`.
pub fn composite_matrix(b_sigma: &DMatrix<f64>, b_r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if b_sigma.shape() != b_r.shape() {
        return Err(Error::Dimension("B_sigma and B_r differ in shape".into()));
    }
    Ok(b_sigma * linalg::diag_power(b_r, -0.5, "B_r")?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CappedDeterminant {
    pub raw: f64,
    pub reported: f64,
}

/// Determinant with a reporting copy `min(|det|, cap)`.
pub fn capped_determinant(m: &DMatrix<f64>, cap: f64) -> Result<CappedDeterminant> {
    linalg::check_square(m, "M")?;
    let raw = m.determinant();
    Ok(CappedDeterminant {
        raw,
        reported: raw.abs().min(cap),
    })
}

/// Everything computed for one portfolio-day.
#[derive(Debug, Clone)]
pub struct LiquiditySnapshot {
    pub date: NaiveDate,
    pub symbols: Vec<String>,
    pub asset_days: Vec<AssetDay>,
    pub q: DVector<f64>,
    pub q_liq: DVector<f64>,
    pub sigma_tt: DMatrix<f64>,
    pub sigma_tt_liq: DMatrix<f64>,
    pub b_r: DMatrix<f64>,
    pub b_sigma: DMatrix<f64>,
    pub b_comp: DMatrix<f64>,
    pub betas: Vec<LiquidityBetas>,
    /// Per asset: the betas could not be formed and neutral values were used.
    pub degenerate: Vec<bool>,
    pub det_jump: CappedDeterminant,
    pub det_diff: CappedDeterminant,
    pub det_comp: CappedDeterminant,
    pub condsvd_residual: f64,
    pub condsvd_regularized: bool,
}

impl LiquiditySnapshot {
    pub fn any_degenerate(&self) -> bool {
        self.degenerate.iter().any(|d| *d)
    }
}

/// Build the snapshot for one day from that day's grids (one per asset, in
/// portfolio order).
///
/// Degenerate asset-days keep their regular and adjusted returns but enter the
/// matrices with neutral betas of 1.
pub fn build_snapshot(grids: &[MinuteGrid]) -> Result<LiquiditySnapshot> {
    check_same_day(grids)?;
    let n = grids.len();
    let adjusted: Vec<AdjustedDay> = grids.iter().map(adjust_grid).collect::<Result<_>>()?;
    let mut betas = Vec::with_capacity(n);
    let mut degenerate = Vec::with_capacity(n);
    for d in &adjusted {
        match liquidity_betas(&d.day) {
            Ok(b) if !d.adjustment_failed && b.jump > 0.0 => {
                betas.push(b);
                degenerate.push(false);
            }
            Ok(_) | Err(Error::DegenerateDay(_)) => {
                betas.push(LiquidityBetas::NEUTRAL);
                degenerate.push(true);
            }
            Err(e) => return Err(e),
        }
    }
    let q = DVector::from_iterator(n, adjusted.iter().map(|d| d.day.daily_return));
    let q_liq = DVector::from_iterator(n, adjusted.iter().map(|d| d.day.daily_liq_return));
    let regular: Vec<&[f64]> = grids.iter().map(|g| g.returns.as_slice()).collect();
    let liq: Vec<&[f64]> = adjusted.iter().map(|d| d.adjusted_returns.as_slice()).collect();
    let sigma_tt = minute_covariance(&regular)?;
    let sigma_tt_liq = minute_covariance(&liq)?;
    let jumps: Vec<f64> = betas.iter().map(|b| b.jump).collect();
    let b_r = jump_matrix(&jumps)?;
    let svd = diffusion_matrix(&sigma_tt, &sigma_tt_liq)?;
    let b_comp = composite_matrix(&svd.h, &b_r)?;
    Ok(LiquiditySnapshot {
        date: grids[0].date,
        symbols: grids.iter().map(|g| g.symbol.clone()).collect(),
        asset_days: adjusted.into_iter().map(|d| d.day).collect(),
        det_jump: capped_determinant(&b_r, DETERMINANT_CAP)?,
        det_diff: capped_determinant(&svd.h, DETERMINANT_CAP)?,
        det_comp: capped_determinant(&b_comp, DETERMINANT_CAP)?,
        q,
        q_liq,
        sigma_tt,
        sigma_tt_liq,
        b_r,
        b_sigma: svd.h,
        b_comp,
        betas,
        degenerate,
        condsvd_residual: svd.residual,
        condsvd_regularized: svd.regularized,
    })
}
