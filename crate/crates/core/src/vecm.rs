//! Vector error correction models on daily return vectors.
//!
//! Windows are `T x N` matrices with one observation per row, oldest first.
//! The model has no deterministic terms:
//!
//! ```text
//! dY_t = Gamma Y_{t-1} + sum_{i=1}^{p-1} Phi*_i dY_{t-i} + E_t
//! ```
//!
//! which is the level VAR `Y_t = sum_{i=1}^p Phi_i Y_{t-i} + E_t` with
//! `Gamma = -(I - sum Phi_i)`.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;

/// Largest lag considered by [`select_lag`].
pub const MAX_LAG: usize = 5;

/// 5% critical values of the Johansen trace statistic without deterministic
/// terms, indexed by `N - r` (1..=12).
const TRACE_CV_5PCT: [f64; 12] = [
    4.1296, 12.3212, 24.2761, 40.1749, 60.0627, 83.9383, 111.7797, 143.6691, 179.5199, 219.4051,
    263.2603, 311.1288,
];

/// 5% trace critical value for `k = N - r` stochastic trends. Beyond the
/// tabulated range the table is continued with its (nearly constant) second
/// difference of 4.
pub fn trace_critical_value(k: usize) -> f64 {
    assert!(k >= 1, "critical values start at N - r = 1");
    if k <= TRACE_CV_5PCT.len() {
        return TRACE_CV_5PCT[k - 1];
    }
    let last = TRACE_CV_5PCT.len();
    let mut cv = TRACE_CV_5PCT[last - 1];
    let mut step = TRACE_CV_5PCT[last - 1] - TRACE_CV_5PCT[last - 2];
    for _ in last..k {
        step += 4.0;
        cv += step;
    }
    cv
}

#[derive(Debug, Clone, Serialize)]
pub struct JohansenResult {
    pub rank: usize,
    /// Eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Trace statistic for `H0: rank <= r`, r = 0..N-1.
    pub trace_stats: Vec<f64>,
    pub critical_values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VecmFit {
    pub p: usize,
    pub coint_rank: usize,
    #[serde(skip)]
    pub gamma: DMatrix<f64>,
    #[serde(skip)]
    pub phi_star: Vec<DMatrix<f64>>,
    #[serde(skip)]
    pub phi: Vec<DMatrix<f64>>,
    #[serde(skip)]
    pub residuals: Vec<DVector<f64>>,
    pub aic: f64,
    pub loglik: f64,
    /// A ridge term was added because the regressors were near singular.
    pub ridge_applied: bool,
}

impl VecmFit {
    pub fn n(&self) -> usize {
        self.gamma.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReturnForecast {
    pub q_hat: DVector<f64>,
    /// `q_hat - q_observed`, once the next observation is known.
    pub e_hat: Option<DVector<f64>>,
}

impl ReturnForecast {
    pub fn observe(&mut self, q: &DVector<f64>) {
        self.e_hat = Some(&self.q_hat - q);
    }
}

fn check_window(window: &DMatrix<f64>) -> Result<()> {
    if window.ncols() == 0 || window.nrows() == 0 {
        return Err(Error::InsufficientData("empty window".into()));
    }
    linalg::check_finite(window, "window")
}

fn diff_row(y: &DMatrix<f64>, t: usize) -> DVector<f64> {
    (y.row(t) - y.row(t - 1)).transpose()
}

/// Regression blocks for the ECM at lag `p`: rows t = p..T-1.
struct EcmData {
    dy: DMatrix<f64>,
    y_lag: DMatrix<f64>,
    /// Lagged differences `[dY_{t-1}, .., dY_{t-p+1}]`; zero columns when p = 1.
    z: DMatrix<f64>,
}

fn ecm_data(y: &DMatrix<f64>, p: usize, start: usize) -> EcmData {
    let (len, n) = y.shape();
    let rows = len - start;
    let mut dy = DMatrix::zeros(rows, n);
    let mut y_lag = DMatrix::zeros(rows, n);
    let mut z = DMatrix::zeros(rows, n * (p - 1));
    for (row, t) in (start..len).enumerate() {
        dy.row_mut(row).copy_from(&diff_row(y, t).transpose());
        y_lag.row_mut(row).copy_from(&y.row(t - 1));
        for i in 1..p {
            let d = diff_row(y, t - i);
            for c in 0..n {
                z[(row, (i - 1) * n + c)] = d[c];
            }
        }
    }
    EcmData { dy, y_lag, z }
}

/// Least squares `Y = X B`, with a ridge fallback when `X'X` is near singular.
fn ols(x: &DMatrix<f64>, y: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let k = x.ncols();
    if k == 0 {
        return (DMatrix::zeros(0, y.ncols()), false);
    }
    let mut xtx = x.transpose() * x;
    let xty = x.transpose() * y;
    let eig = linalg::sorted_eigen(&xtx);
    let top = eig.values[0];
    let bottom = eig.values[k - 1];
    let mut ridge = false;
    if !(top > 0.0) || bottom <= 1e-12 * top {
        let lambda = (1e-8 * xtx.trace() / k as f64).max(1e-300);
        for i in 0..k {
            xtx[(i, i)] += lambda;
        }
        ridge = true;
        log::warn!("near-singular regressors: ridge {lambda:e} added");
    }
    let coef = match Cholesky::new(xtx.clone()) {
        Some(ch) => ch.solve(&xty),
        None => xtx.pseudo_inverse(1e-14).map(|pinv| pinv * &xty).unwrap_or_else(|_| DMatrix::zeros(k, y.ncols())),
    };
    (coef, ridge)
}

fn residualize(x: &DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
    if z.ncols() == 0 {
        return x.clone();
    }
    let (b, _) = ols(z, x);
    x - z * b
}

struct ReducedRank {
    eigenvalues: Vec<f64>,
    /// Columns normalized so `v' S11 v = I`.
    vectors: DMatrix<f64>,
    s01: DMatrix<f64>,
}

fn reduced_rank(data: &EcmData) -> Result<ReducedRank> {
    let r0 = residualize(&data.dy, &data.z);
    let r1 = residualize(&data.y_lag, &data.z);
    let t = r0.nrows() as f64;
    let s00 = r0.transpose() * &r0 / t;
    let s11 = r1.transpose() * &r1 / t;
    let s01 = r0.transpose() * &r1 / t;
    let s00_inv = linalg::inverse(&s00, "S00")?;
    let ch = Cholesky::new(linalg::symmetrize(&s11)).ok_or_else(|| Error::Singular {
        name: "S11".into(),
        detail: "lagged levels are collinear".into(),
    })?;
    let l_inv = linalg::inverse(&ch.l(), "chol(S11)")?;
    let m = &l_inv * s01.transpose() * &s00_inv * &s01 * l_inv.transpose();
    let eig = linalg::sorted_eigen(&m);
    let vectors = l_inv.transpose() * eig.vectors;
    let eigenvalues = eig.values.iter().map(|v| v.clamp(0.0, 1.0 - 1e-15)).collect();
    Ok(ReducedRank {
        eigenvalues,
        vectors,
        s01,
    })
}

/// Johansen trace test at 5% with lag `p` (in levels). Requires at least
/// `10 N` observations.
pub fn johansen_trace(window: &DMatrix<f64>, p: usize) -> Result<JohansenResult> {
    check_window(window)?;
    let (len, n) = window.shape();
    if p == 0 {
        return Err(Error::InvalidInput("lag must be >= 1".into()));
    }
    if len < 10 * n || len <= p + n * p + 1 {
        return Err(Error::InsufficientData(format!(
            "Johansen test needs at least {} observations, got {len}",
            (10 * n).max(p + n * p + 2)
        )));
    }
    let data = ecm_data(window, p, p);
    let rr = reduced_rank(&data)?;
    let t_eff = data.dy.nrows() as f64;
    let mut trace_stats = Vec::with_capacity(n);
    let mut critical_values = Vec::with_capacity(n);
    let mut rank = n;
    for r in 0..n {
        let stat = -t_eff * rr.eigenvalues[r..].iter().map(|l| (1.0 - l).ln()).sum::<f64>();
        let cv = trace_critical_value(n - r);
        trace_stats.push(stat);
        critical_values.push(cv);
        if rank == n && stat < cv {
            rank = r;
        }
    }
    Ok(JohansenResult {
        rank,
        eigenvalues: rr.eigenvalues,
        trace_stats,
        critical_values,
    })
}

/// Lag order in `1..=5` minimizing `ln det Sigma + 2 p N^2 / T_eff` for level
/// VARs fitted on a common sample. Ties go to the smaller lag.
pub fn select_lag(window: &DMatrix<f64>) -> Result<usize> {
    check_window(window)?;
    let (len, n) = window.shape();
    if len <= MAX_LAG || len - MAX_LAG <= MAX_LAG * n {
        return Err(Error::InsufficientData(format!(
            "lag selection needs more than {} observations, got {len}",
            MAX_LAG + MAX_LAG * n
        )));
    }
    let rows = len - MAX_LAG;
    let y = window.rows(MAX_LAG, rows).into_owned();
    let mut best = (f64::INFINITY, 1);
    for p in 1..=MAX_LAG {
        let x = DMatrix::from_fn(rows, n * p, |r, c| window[(MAX_LAG + r - 1 - c / n, c % n)]);
        let (b, _) = ols(&x, &y);
        let e = &y - &x * b;
        let sigma = e.transpose() * &e / rows as f64;
        let det = sigma.determinant();
        let aic = if det > 0.0 { det.ln() } else { f64::NEG_INFINITY } + 2.0 * (p * n * n) as f64 / rows as f64;
        if aic < best.0 {
            best = (aic, p);
        }
    }
    Ok(best.1)
}

/// Map ECM coefficients to level-VAR matrices.
pub fn level_matrices(gamma: &DMatrix<f64>, phi_star: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    let n = gamma.nrows();
    let p = phi_star.len() + 1;
    let eye = DMatrix::<f64>::identity(n, n);
    if p == 1 {
        return vec![eye + gamma];
    }
    let mut phi = Vec::with_capacity(p);
    phi.push(&eye + gamma + &phi_star[0]);
    for i in 1..p - 1 {
        phi.push(&phi_star[i] - &phi_star[i - 1]);
    }
    phi.push(-&phi_star[p - 2]);
    phi
}

/// Estimate the ECM at lag `p` with cointegration rank `coint_rank`.
pub fn fit_vecm(window: &DMatrix<f64>, p: usize, coint_rank: usize) -> Result<VecmFit> {
    check_window(window)?;
    let (len, n) = window.shape();
    if p == 0 {
        return Err(Error::InvalidInput("lag must be >= 1".into()));
    }
    if coint_rank > n {
        return Err(Error::InvalidInput(format!("rank {coint_rank} exceeds N = {n}")));
    }
    if len <= p + n * p {
        return Err(Error::InsufficientData(format!(
            "VECM({p}) on {n} series needs more than {} observations, got {len}",
            p + n * p
        )));
    }
    let data = ecm_data(window, p, p);
    let mut ridge = false;
    let (gamma, phi_star_stack) = if coint_rank == n {
        let x = concat_cols(&data.y_lag, &data.z);
        let (b, r) = ols(&x, &data.dy);
        ridge |= r;
        let gamma = b.rows(0, n).transpose();
        let rest = b.rows(n, b.nrows() - n).into_owned();
        (gamma, rest)
    } else if coint_rank == 0 {
        let (b, r) = ols(&data.z, &data.dy);
        ridge |= r;
        (DMatrix::zeros(n, n), b)
    } else {
        let rr = reduced_rank(&data)?;
        let beta = rr.vectors.columns(0, coint_rank).into_owned();
        let alpha = &rr.s01 * &beta;
        let gamma = &alpha * beta.transpose();
        let target = &data.dy - &data.y_lag * gamma.transpose();
        let (b, r) = ols(&data.z, &target);
        ridge |= r;
        (gamma, b)
    };
    let phi_star: Vec<DMatrix<f64>> = (0..p - 1)
        .map(|i| phi_star_stack.rows(i * n, n).transpose())
        .collect();
    let phi = level_matrices(&gamma, &phi_star);

    let fitted = &data.y_lag * gamma.transpose()
        + if p > 1 {
            &data.z * &phi_star_stack
        } else {
            DMatrix::zeros(data.dy.nrows(), n)
        };
    let e = &data.dy - fitted;
    let t_eff = e.nrows() as f64;
    let sigma = e.transpose() * &e / t_eff;
    let det = sigma.determinant();
    let ln_det = if det > 0.0 { det.ln() } else { f64::NEG_INFINITY };
    let nf = n as f64;
    let loglik = -0.5 * t_eff * (nf * (2.0 * std::f64::consts::PI).ln() + ln_det + nf);
    let params = n * n * (p - 1) + coint_rank * (2 * n - coint_rank);
    let aic = ln_det + 2.0 * params as f64 / t_eff;
    let residuals = e.row_iter().map(|r| r.transpose()).collect();
    Ok(VecmFit {
        p,
        coint_rank,
        gamma,
        phi_star,
        phi,
        residuals,
        aic,
        loglik,
        ridge_applied: ridge,
    })
}

fn concat_cols(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

/// Rank from the trace test, lag from AIC, then the fit.
pub fn fit_auto(window: &DMatrix<f64>) -> Result<(VecmFit, JohansenResult)> {
    let p = select_lag(window)?;
    let jo = johansen_trace(window, p)?;
    Ok((fit_vecm(window, p, jo.rank)?, jo))
}

/// One-step forecast `sum_i Phi_i Q_{t+1-i}` from the last `p` rows of
/// `history` (oldest first).
pub fn forecast_one_step(fit: &VecmFit, history: &DMatrix<f64>) -> Result<ReturnForecast> {
    let n = fit.n();
    if history.ncols() != n || history.nrows() < fit.p {
        return Err(Error::Dimension(format!(
            "forecast needs at least {} rows of {n} columns, got {}x{}",
            fit.p,
            history.nrows(),
            history.ncols()
        )));
    }
    let last = history.nrows() - 1;
    let mut q_hat = DVector::zeros(n);
    for (i, phi) in fit.phi.iter().enumerate() {
        q_hat += phi * history.row(last - i).transpose();
    }
    Ok(ReturnForecast { q_hat, e_hat: None })
}

/// In-sample residuals of a fixed fit on another window (same N and lag).
pub fn residuals_with(fit: &VecmFit, window: &DMatrix<f64>) -> Result<Vec<DVector<f64>>> {
    let (len, n) = window.shape();
    if n != fit.n() || len <= fit.p {
        return Err(Error::Dimension("window does not match the fit".into()));
    }
    let mut out = Vec::with_capacity(len - fit.p);
    for t in fit.p..len {
        let mut pred = DVector::zeros(n);
        for (i, phi) in fit.phi.iter().enumerate() {
            pred += phi * window.row(t - 1 - i).transpose();
        }
        out.push(window.row(t).transpose() - pred);
    }
    Ok(out)
}
