//! Univariate GARCH(1,1) volatilities and DCC / ADCC correlation dynamics.
//!
//! Estimation is two-stage Gaussian quasi-maximum likelihood: each residual
//! series gets its own GARCH(1,1), then the correlation parameters are fitted
//! on the standardized residuals `xi_t = e_t / sqrt(h_t)`:
//!
//! ```text
//! O_{t+1} = (1 - a - b) Obar - g Nbar + a xi_t xi_t' + b O_t + g n_t n_t'
//! P_t     = diag(O_t)^{-1/2} O_t diag(O_t)^{-1/2}
//! ```
//!
//! with `n_t = 1[xi_t < 0] * xi_t` and `g = 0` for plain DCC.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::optimize::{bfgs, from_simplex, to_simplex, BfgsOptions};

/// Minimum series length for a GARCH fit.
pub const MIN_GARCH_LEN: usize = 50;

/// Fitted asymmetry below this is treated as sitting on the `g >= 0` bound.
const G_BOUND_TOL: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Garch11Params {
    pub omega: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Garch11Params {
    /// `h_{t+1} = omega + alpha e_t^2 + beta h_t`.
    pub fn step(&self, e2: f64, h: f64) -> f64 {
        self.omega + self.alpha * e2 + self.beta * h
    }
}

#[derive(Debug, Clone)]
pub struct GarchFit {
    pub params: Garch11Params,
    pub loglik: f64,
    /// Conditional variances `h_1..h_T`.
    pub variances: Vec<f64>,
    pub converged: bool,
    /// The optimizer failed and variance targeting was used instead.
    pub fallback: bool,
}

fn mean_square(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Conditional variances with the pre-sample variance and squared shock both
/// set to the series mean square.
pub fn garch_variances(params: &Garch11Params, series: &[f64]) -> Vec<f64> {
    let s2 = mean_square(series);
    let mut out = Vec::with_capacity(series.len());
    let (mut e2, mut h) = (s2, s2);
    for &e in series {
        h = params.step(e2, h);
        out.push(h);
        e2 = e * e;
    }
    out
}

pub fn garch_loglik(params: &Garch11Params, series: &[f64]) -> f64 {
    let s2 = mean_square(series);
    let (mut e2, mut h) = (s2, s2);
    let mut ll = 0.0;
    for &e in series {
        h = params.step(e2, h);
        if !(h > 0.0) {
            return f64::NEG_INFINITY;
        }
        e2 = e * e;
        ll += LN_2PI + h.ln() + e2 / h;
    }
    -0.5 * ll
}

fn check_series(series: &[f64]) -> Result<f64> {
    if series.len() < MIN_GARCH_LEN {
        return Err(Error::InsufficientData(format!(
            "GARCH needs at least {MIN_GARCH_LEN} observations, got {}",
            series.len()
        )));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite residual".into()));
    }
    let s2 = mean_square(series);
    if !(s2 > 0.0) {
        return Err(Error::InvalidInput("residual series has zero variance".into()));
    }
    Ok(s2)
}

fn garch_from_theta(theta: &[f64], s2: f64) -> Garch11Params {
    let ab = to_simplex(&theta[1..3]);
    Garch11Params {
        omega: theta[0].exp() * s2,
        alpha: ab[0],
        beta: ab[1],
    }
}

/// Quasi-MLE of GARCH(1,1) subject to `omega > 0`, `alpha, beta >= 0`,
/// `alpha + beta < 1`, from three fixed starting points.
pub fn fit_garch11(series: &[f64]) -> Result<GarchFit> {
    let s2 = check_series(series)?;
    let n = series.len() as f64;
    let objective = |theta: &[f64]| -garch_loglik(&garch_from_theta(theta, s2), series) / n;
    let opts = BfgsOptions::default();
    let mut best: Option<(f64, Vec<f64>, bool)> = None;
    for (alpha, beta) in [(0.05, 0.90), (0.10, 0.80), (0.15, 0.60)] {
        let mut start = vec![(1.0_f64 - alpha - beta).ln()];
        start.extend(from_simplex(&[alpha, beta]));
        let m = bfgs(objective, &start, &opts);
        if m.f.is_finite() && best.as_ref().is_none_or(|b| m.f < b.0) {
            best = Some((m.f, m.x, m.converged));
        }
    }
    match best {
        Some((_, theta, converged)) => {
            let params = garch_from_theta(&theta, s2);
            Ok(GarchFit {
                loglik: garch_loglik(&params, series),
                variances: garch_variances(&params, series),
                params,
                converged,
                fallback: false,
            })
        }
        None => {
            log::warn!("GARCH optimizer failed; using variance targeting with (0.05, 0.90)");
            let params = Garch11Params {
                omega: 0.05 * s2,
                alpha: 0.05,
                beta: 0.90,
            };
            Ok(GarchFit {
                loglik: garch_loglik(&params, series),
                variances: garch_variances(&params, series),
                params,
                converged: false,
                fallback: true,
            })
        }
    }
}

/// Fit only `omega` with `alpha` and `beta` held fixed.
pub fn fit_garch11_fixed_dynamics(series: &[f64], alpha: f64, beta: f64) -> Result<GarchFit> {
    let s2 = check_series(series)?;
    if !(alpha >= 0.0 && beta >= 0.0 && alpha + beta < 1.0) {
        return Err(Error::Domain(format!("need alpha, beta >= 0 and alpha + beta < 1, got ({alpha}, {beta})")));
    }
    let n = series.len() as f64;
    let make = |theta: &[f64]| Garch11Params {
        omega: theta[0].exp() * s2,
        alpha,
        beta,
    };
    let m = bfgs(
        |theta| -garch_loglik(&make(theta), series) / n,
        &[(1.0 - alpha - beta).ln()],
        &BfgsOptions {
            grad_tol: 1e-10,
            f_tol: 1e-16,
            ..Default::default()
        },
    );
    let params = make(&m.x);
    Ok(GarchFit {
        loglik: garch_loglik(&params, series),
        variances: garch_variances(&params, series),
        params,
        converged: m.converged,
        fallback: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DccKind {
    Dcc,
    Adcc,
}

impl DccKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DccKind::Dcc => "dcc",
            DccKind::Adcc => "adcc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DccParams {
    pub a: f64,
    pub b: f64,
    pub g: f64,
}

#[derive(Debug, Clone)]
pub struct DccFit {
    pub kind: DccKind,
    pub a: f64,
    pub b: f64,
    pub g: f64,
    pub o_bar: DMatrix<f64>,
    pub n_bar: DMatrix<f64>,
    /// GARCH plus correlation log-likelihood.
    pub loglik: f64,
    pub corr_loglik: f64,
    pub garch: Vec<Garch11Params>,
    /// Terminal residual `e_T`, variances `h_T`, standardized residual `xi_T`
    /// and correlation state `O_T`.
    pub last_e: DVector<f64>,
    pub last_h: DVector<f64>,
    pub last_xi: DVector<f64>,
    pub last_o: DMatrix<f64>,
    pub converged: bool,
    /// Non-convergence fallback to (a, b) = (0.02, 0.95).
    pub fallback: bool,
    pub garch_fallback: bool,
}

impl DccFit {
    pub fn params(&self) -> DccParams {
        DccParams {
            a: self.a,
            b: self.b,
            g: self.g,
        }
    }

    pub fn n(&self) -> usize {
        self.o_bar.nrows()
    }
}

/// Standardized residuals and correlation targets for one window, stored
/// row-major for the likelihood loop.
struct CorrData {
    t: usize,
    n: usize,
    xi: Vec<f64>,
    neg: Vec<f64>,
    o_bar: Vec<f64>,
    n_bar: Vec<f64>,
}

impl CorrData {
    fn new(xi: &DMatrix<f64>) -> Self {
        let (t, n) = xi.shape();
        let mut rows = vec![0.0; t * n];
        let mut neg = vec![0.0; t * n];
        for r in 0..t {
            for c in 0..n {
                let v = xi[(r, c)];
                rows[r * n + c] = v;
                neg[r * n + c] = if v < 0.0 { v } else { 0.0 };
            }
        }
        let mut s = vec![0.0; n * n];
        let mut nb = vec![0.0; n * n];
        for r in 0..t {
            let x = &rows[r * n..(r + 1) * n];
            let m = &neg[r * n..(r + 1) * n];
            for i in 0..n {
                for j in 0..n {
                    s[i * n + j] += x[i] * x[j];
                    nb[i * n + j] += m[i] * m[j];
                }
            }
        }
        let tf = t as f64;
        nb.iter_mut().for_each(|v| *v /= tf);
        let mut o_bar = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                o_bar[i * n + j] = s[i * n + j] / (s[i * n + i] * s[j * n + j]).sqrt();
            }
        }
        Self {
            t,
            n,
            xi: rows,
            neg,
            o_bar,
            n_bar: nb,
        }
    }

    fn to_matrix(&self, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, v)
    }
}

/// Correlation log-likelihood `-1/2 sum(ln|P_t| + xi' P_t^{-1} xi - xi' xi)`
/// and the terminal state `O_T`.
fn corr_loglik(data: &CorrData, p: DccParams, terminal: Option<&mut Vec<f64>>) -> f64 {
    let n = data.n;
    let c = 1.0 - p.a - p.b;
    let base: Vec<f64> = data
        .o_bar
        .iter()
        .zip(&data.n_bar)
        .map(|(o, nb)| c * o - p.g * nb)
        .collect();
    let mut o = data.o_bar.clone();
    let mut corr = vec![0.0; n * n];
    let mut chol = vec![0.0; n * n];
    let mut scale = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut ll = 0.0;
    for t in 0..data.t {
        let x = &data.xi[t * n..(t + 1) * n];
        for i in 0..n {
            let d = o[i * n + i];
            if !(d > 0.0) {
                return f64::NEG_INFINITY;
            }
            scale[i] = 1.0 / d.sqrt();
        }
        for i in 0..n {
            for j in 0..n {
                corr[i * n + j] = o[i * n + j] * scale[i] * scale[j];
            }
        }
        // Cholesky of P_t.
        let mut logdet = 0.0;
        for j in 0..n {
            let mut diag = corr[j * n + j];
            for k in 0..j {
                diag -= chol[j * n + k] * chol[j * n + k];
            }
            if !(diag > 0.0) {
                return f64::NEG_INFINITY;
            }
            let ljj = diag.sqrt();
            chol[j * n + j] = ljj;
            logdet += 2.0 * ljj.ln();
            for i in (j + 1)..n {
                let mut v = corr[i * n + j];
                for k in 0..j {
                    v -= chol[i * n + k] * chol[j * n + k];
                }
                chol[i * n + j] = v / ljj;
            }
        }
        let mut quad = 0.0;
        let mut xx = 0.0;
        for i in 0..n {
            let mut v = x[i];
            for k in 0..i {
                v -= chol[i * n + k] * z[k];
            }
            z[i] = v / chol[i * n + i];
            quad += z[i] * z[i];
            xx += x[i] * x[i];
        }
        ll += logdet + quad - xx;
        if t + 1 == data.t {
            break;
        }
        let m = &data.neg[t * n..(t + 1) * n];
        for i in 0..n {
            for j in 0..n {
                let k = i * n + j;
                o[k] = base[k] + p.a * x[i] * x[j] + p.b * o[k] + p.g * m[i] * m[j];
            }
        }
    }
    if let Some(out) = terminal {
        *out = o;
    }
    -0.5 * ll
}

/// GARCH fits for every column plus the standardized residual matrix.
pub struct UnivariateStage {
    pub fits: Vec<GarchFit>,
    pub xi: DMatrix<f64>,
}

fn residual_matrix(residuals: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let t = residuals.len();
    let n = residuals.first().map(|r| r.len()).unwrap_or(0);
    if t == 0 || n == 0 || residuals.iter().any(|r| r.len() != n) {
        return Err(Error::Dimension("residual vectors are empty or ragged".into()));
    }
    Ok(DMatrix::from_fn(t, n, |r, c| residuals[r][c]))
}

pub fn fit_univariate(residuals: &DMatrix<f64>) -> Result<UnivariateStage> {
    let (t, n) = residuals.shape();
    let mut fits = Vec::with_capacity(n);
    let mut xi = DMatrix::zeros(t, n);
    for c in 0..n {
        let col: Vec<f64> = residuals.column(c).iter().copied().collect();
        let fit = fit_garch11(&col)?;
        for r in 0..t {
            xi[(r, c)] = col[r] / fit.variances[r].sqrt();
        }
        fits.push(fit);
    }
    Ok(UnivariateStage { fits, xi })
}

struct CorrEstimate {
    params: DccParams,
    loglik: f64,
    converged: bool,
    fallback: bool,
}

const DCC_STARTS: [(f64, f64); 3] = [(0.05, 0.90), (0.02, 0.95), (0.10, 0.80)];
const ADCC_STARTS: [(f64, f64, f64); 3] = [(0.05, 0.90, 0.02), (0.02, 0.95, 0.01), (0.08, 0.80, 0.05)];

fn estimate_dcc(data: &CorrData) -> CorrEstimate {
    let tf = data.t as f64;
    let params = |theta: &[f64]| {
        let s = to_simplex(theta);
        DccParams { a: s[0], b: s[1], g: 0.0 }
    };
    let objective = |theta: &[f64]| -corr_loglik(data, params(theta), None) / tf;
    let opts = BfgsOptions::default();
    let zero = DccParams { a: 0.0, b: 0.0, g: 0.0 };
    let mut best = CorrEstimate {
        params: zero,
        loglik: corr_loglik(data, zero, None),
        converged: true,
        fallback: false,
    };
    let mut any_converged = false;
    let mut best_interior: Option<(f64, DccParams)> = None;
    for (a, b) in DCC_STARTS {
        let m = bfgs(objective, &from_simplex(&[a, b]), &opts);
        any_converged |= m.converged;
        if m.f.is_finite() && best_interior.as_ref().is_none_or(|(f, _)| m.f < *f) {
            best_interior = Some((m.f, params(&m.x)));
        }
    }
    if let Some((_, p)) = best_interior {
        let ll = corr_loglik(data, p, None);
        if ll > best.loglik || !best.loglik.is_finite() {
            best = CorrEstimate {
                params: p,
                loglik: ll,
                converged: any_converged,
                fallback: false,
            };
        }
    }
    if !best.loglik.is_finite() {
        return fallback_estimate(data);
    }
    best
}

fn estimate_adcc(data: &CorrData, dcc: &CorrEstimate) -> CorrEstimate {
    let tf = data.t as f64;
    let params = |theta: &[f64]| {
        let s = to_simplex(theta);
        DccParams { a: s[0], b: s[1], g: s[2] }
    };
    let objective = |theta: &[f64]| -corr_loglik(data, params(theta), None) / tf;
    let opts = BfgsOptions::default();
    let mut starts: Vec<Vec<f64>> = ADCC_STARTS.iter().map(|&(a, b, g)| from_simplex(&[a, b, g])).collect();
    if dcc.params.a > 0.0 && dcc.params.b > 0.0 && !dcc.fallback {
        starts.push(from_simplex(&[dcc.params.a, dcc.params.b, 0.01]));
    }
    let mut best_interior: Option<(f64, DccParams)> = None;
    let mut any_converged = false;
    for start in starts {
        let m = bfgs(objective, &start, &opts);
        any_converged |= m.converged;
        if m.f.is_finite() && best_interior.as_ref().is_none_or(|(f, _)| m.f < *f) {
            best_interior = Some((m.f, params(&m.x)));
        }
    }
    // The g = 0 face of the ADCC region is exactly the DCC problem.
    let mut best = CorrEstimate {
        params: dcc.params,
        loglik: dcc.loglik,
        converged: dcc.converged,
        fallback: dcc.fallback,
    };
    if let Some((_, p)) = best_interior {
        let ll = corr_loglik(data, p, None);
        if p.g >= G_BOUND_TOL && (ll > best.loglik || !best.loglik.is_finite()) {
            best = CorrEstimate {
                params: p,
                loglik: ll,
                converged: any_converged,
                fallback: false,
            };
        }
    }
    if !best.loglik.is_finite() {
        return fallback_estimate(data);
    }
    best
}

fn fallback_estimate(data: &CorrData) -> CorrEstimate {
    log::warn!("correlation fit did not converge; using (a, b) = (0.02, 0.95)");
    let params = DccParams { a: 0.02, b: 0.95, g: 0.0 };
    CorrEstimate {
        params,
        loglik: corr_loglik(data, params, None),
        converged: false,
        fallback: true,
    }
}

fn assemble(
    kind: DccKind,
    data: &CorrData,
    uni: &UnivariateStage,
    residuals: &DMatrix<f64>,
    est: &CorrEstimate,
) -> DccFit {
    let mut last_o = Vec::new();
    let corr_ll = corr_loglik(data, est.params, Some(&mut last_o));
    let last_o = if last_o.is_empty() {
        data.to_matrix(&data.o_bar)
    } else {
        data.to_matrix(&last_o)
    };
    let t = residuals.nrows();
    let garch_ll: f64 = uni.fits.iter().map(|f| f.loglik).sum();
    DccFit {
        kind,
        a: est.params.a,
        b: est.params.b,
        g: est.params.g,
        o_bar: data.to_matrix(&data.o_bar),
        n_bar: data.to_matrix(&data.n_bar),
        loglik: garch_ll + corr_ll,
        corr_loglik: corr_ll,
        garch: uni.fits.iter().map(|f| f.params).collect(),
        last_e: residuals.row(t - 1).transpose(),
        last_h: DVector::from_iterator(uni.fits.len(), uni.fits.iter().map(|f| f.variances[t - 1])),
        last_xi: uni.xi.row(t - 1).transpose(),
        last_o,
        converged: est.converged,
        fallback: est.fallback,
        garch_fallback: uni.fits.iter().any(|f| f.fallback),
    }
}

/// Fit both correlation models on one residual window, sharing the GARCH stage.
pub fn fit_dcc_pair(residuals: &[DVector<f64>]) -> Result<(DccFit, DccFit)> {
    let e = residual_matrix(residuals)?;
    let uni = fit_univariate(&e)?;
    let data = CorrData::new(&uni.xi);
    let dcc = estimate_dcc(&data);
    let adcc = estimate_adcc(&data, &dcc);
    Ok((
        assemble(DccKind::Dcc, &data, &uni, &e, &dcc),
        assemble(DccKind::Adcc, &data, &uni, &e, &adcc),
    ))
}

pub fn fit_dcc(residuals: &[DVector<f64>], kind: DccKind) -> Result<DccFit> {
    let (dcc, adcc) = fit_dcc_pair(residuals)?;
    Ok(match kind {
        DccKind::Dcc => dcc,
        DccKind::Adcc => adcc,
    })
}

/// Re-run the recursions of an existing fit on a new residual window, keeping
/// every estimated parameter but recomputing the variance initialization and
/// the correlation targets.
pub fn refilter(fit: &DccFit, residuals: &[DVector<f64>]) -> Result<DccFit> {
    let e = residual_matrix(residuals)?;
    let (t, n) = e.shape();
    if n != fit.n() {
        return Err(Error::Dimension(format!("fit has N = {} but window has {n}", fit.n())));
    }
    let mut fits = Vec::with_capacity(n);
    let mut xi = DMatrix::zeros(t, n);
    for (c, params) in fit.garch.iter().enumerate() {
        let col: Vec<f64> = e.column(c).iter().copied().collect();
        check_series(&col)?;
        let variances = garch_variances(params, &col);
        for r in 0..t {
            xi[(r, c)] = col[r] / variances[r].sqrt();
        }
        fits.push(GarchFit {
            params: *params,
            loglik: garch_loglik(params, &col),
            variances,
            converged: true,
            fallback: false,
        });
    }
    let uni = UnivariateStage { fits, xi };
    let data = CorrData::new(&uni.xi);
    let est = CorrEstimate {
        params: fit.params(),
        loglik: 0.0,
        converged: fit.converged,
        fallback: fit.fallback,
    };
    let mut out = assemble(fit.kind, &data, &uni, &e, &est);
    out.garch_fallback = fit.garch_fallback;
    Ok(out)
}

/// The fit with strictly higher log-likelihood; ties go to DCC.
pub fn select_best<'a>(dcc: &'a DccFit, adcc: &'a DccFit) -> &'a DccFit {
    if adcc.loglik > dcc.loglik {
        adcc
    } else {
        dcc
    }
}

#[derive(Debug, Clone)]
pub struct CovarianceForecast {
    pub omega: DMatrix<f64>,
    pub h_next: DVector<f64>,
    pub p_next: DMatrix<f64>,
    /// Negative eigenvalues had to be clipped.
    pub clipped: bool,
}

/// One-step covariance `H P H` with `H = diag(sqrt(h_{T+1}))`.
pub fn forecast_covariance(fit: &DccFit) -> Result<CovarianceForecast> {
    let n = fit.n();
    let h_next = DVector::from_fn(n, |i, _| {
        let e = fit.last_e[i];
        fit.garch[i].step(e * e, fit.last_h[i])
    });
    let neg = fit.last_xi.map(|v| if v < 0.0 { v } else { 0.0 });
    let o_next = &fit.o_bar * (1.0 - fit.a - fit.b) - &fit.n_bar * fit.g
        + &fit.last_xi * fit.last_xi.transpose() * fit.a
        + &fit.last_o * fit.b
        + &neg * neg.transpose() * fit.g;
    let p_next = normalize_correlation(&o_next)?;
    let sd = h_next.map(|v| v.sqrt());
    let omega = DMatrix::from_fn(n, n, |i, j| sd[i] * p_next[(i, j)] * sd[j]);
    let (omega, clipped) = linalg::clip_psd(&omega);
    if clipped {
        log::warn!("covariance forecast was not PSD; negative eigenvalues clipped");
    }
    Ok(CovarianceForecast {
        omega,
        h_next,
        p_next,
        clipped,
    })
}

pub fn normalize_correlation(o: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = o.nrows();
    for i in 0..n {
        if !(o[(i, i)] > 0.0) {
            return Err(Error::Domain(format!("correlation state has diagonal {} <= 0", o[(i, i)])));
        }
    }
    let mut p = DMatrix::from_fn(n, n, |i, j| o[(i, j)] / (o[(i, i)] * o[(j, j)]).sqrt());
    for i in 0..n {
        p[(i, i)] = 1.0;
    }
    Ok(p)
}

/// `B_r^{-1/2} Omega B_r^{-1/2}`.
pub fn scale_covariance_by_jump(omega: &DMatrix<f64>, b_r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if omega.shape() != b_r.shape() {
        return Err(Error::Dimension("Omega and B_r differ in shape".into()));
    }
    let s = linalg::diag_power(b_r, -0.5, "B_r")?;
    Ok(linalg::symmetrize(&(&s * omega * &s)))
}

#[cfg(test)]
pub(crate) mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    pub(crate) fn simulate_garch(params: Garch11Params, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut h = params.omega / (1.0 - params.alpha - params.beta);
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let z: f64 = StandardNormal.sample(rng);
            let e = z * h.sqrt();
            out.push(e);
            h = params.step(e * e, h);
        }
        out
    }

    /// Residuals whose correlation follows DCC(a, b) around `rho`, with GARCH
    /// volatilities.
    pub(crate) fn simulate_dcc(a: f64, b: f64, rho: f64, len: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
        let o_bar = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
        let g = Garch11Params { omega: 0.05, alpha: 0.05, beta: 0.90 };
        let mut o = o_bar.clone();
        let mut h = [1.0_f64, 1.0];
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let p = normalize_correlation(&o).unwrap();
            let l = p.cholesky().unwrap().l();
            let z = DVector::from_fn(2, |_, _| StandardNormal.sample(rng));
            let xi = l * z;
            let e = DVector::from_fn(2, |i, _| xi[i] * h[i].sqrt());
            for i in 0..2 {
                h[i] = g.step(e[i] * e[i], h[i]);
            }
            o = &o_bar * (1.0 - a - b) + &xi * xi.transpose() * a + &o * b;
            out.push(e);
        }
        out
    }

    #[test]
    fn one_step_recursion() {
        let p = Garch11Params { omega: 0.1, alpha: 0.1, beta: 0.8 };
        assert!((p.step(1.0, 1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_variance_fit_gives_sample_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..500).map(|_| StandardNormal.sample(&mut rng)).collect();
        let fit = fit_garch11_fixed_dynamics(&x, 0.0, 0.0).unwrap();
        let s2 = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        assert!((fit.params.omega - s2).abs() < 1e-8 * s2, "{} vs {s2}", fit.params.omega);
    }

    #[test]
    fn recovers_garch_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let truth = Garch11Params { omega: 0.1, alpha: 0.1, beta: 0.8 };
        let x = simulate_garch(truth, 10_000, &mut rng);
        let fit = fit_garch11(&x).unwrap();
        assert!((fit.params.omega - 0.1).abs() < 0.1);
        assert!((fit.params.alpha - 0.1).abs() < 0.1);
        assert!((fit.params.beta - 0.8).abs() < 0.1);
        assert!(fit.params.alpha + fit.params.beta < 1.0);
    }

    #[test]
    fn short_series_rejected() {
        assert!(matches!(fit_garch11(&[0.1; 20]), Err(Error::InsufficientData(_))));
        assert!(matches!(fit_garch11(&[0.0; 80]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn zero_dynamics_reproduce_constant_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let res = simulate_dcc(0.05, 0.9, 0.4, 300, &mut rng);
        let e = residual_matrix(&res).unwrap();
        let uni = fit_univariate(&e).unwrap();
        let data = CorrData::new(&uni.xi);
        let mut last = Vec::new();
        let ll = corr_loglik(&data, DccParams { a: 0.0, b: 0.0, g: 0.0 }, Some(&mut last));
        assert_eq!(last, data.o_bar);
        // Constant-correlation oracle.
        let p = data.to_matrix(&data.o_bar);
        let inv = p.clone().try_inverse().unwrap();
        let ld = p.determinant().ln();
        let mut oracle = 0.0;
        for r in 0..data.t {
            let x = uni.xi.row(r).transpose();
            oracle += ld + (x.transpose() * &inv * &x)[0] - x.dot(&x);
        }
        assert!((ll + 0.5 * oracle).abs() < 1e-9 * oracle.abs());
    }

    #[test]
    fn positive_residuals_make_adcc_match_dcc_at_zero_g() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let res: Vec<DVector<f64>> = simulate_dcc(0.05, 0.9, 0.3, 200, &mut rng)
            .into_iter()
            .map(|v| v.map(|x| x.abs() + 1e-3))
            .collect();
        let e = residual_matrix(&res).unwrap();
        let uni = fit_univariate(&e).unwrap();
        let data = CorrData::new(&uni.xi);
        assert!(data.n_bar.iter().all(|v| *v == 0.0));
        let p = DccParams { a: 0.04, b: 0.9, g: 0.0 };
        let with_g = DccParams { g: 0.03, ..p };
        assert_eq!(corr_loglik(&data, p, None), corr_loglik(&data, with_g, None));
    }

    #[test]
    fn recovers_dcc_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let res = simulate_dcc(0.05, 0.90, 0.5, 3000, &mut rng);
        let fit = fit_dcc(&res, DccKind::Dcc).unwrap();
        assert!((fit.a - 0.05).abs() < 0.05, "a = {}", fit.a);
        assert!((fit.b - 0.90).abs() < 0.05, "b = {}", fit.b);
        assert!(fit.a + fit.b < 1.0);
    }

    #[test]
    fn fitted_correlations_are_valid_and_beat_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let res = simulate_dcc(0.04, 0.93, 0.2, 400, &mut rng);
        let (dcc, adcc) = fit_dcc_pair(&res).unwrap();
        for fit in [&dcc, &adcc] {
            assert!(fit.a + fit.b + fit.g < 1.0);
            let e = residual_matrix(&res).unwrap();
            let uni = fit_univariate(&e).unwrap();
            let data = CorrData::new(&uni.xi);
            let constant = corr_loglik(&data, DccParams { a: 0.0, b: 0.0, g: 0.0 }, None);
            assert!(fit.corr_loglik >= constant);
            let f = forecast_covariance(fit).unwrap();
            for i in 0..2 {
                assert!((f.p_next[(i, i)] - 1.0).abs() < 1e-10);
            }
            assert!(linalg::sorted_eigen(&f.p_next).values.iter().all(|v| *v >= -1e-10));
        }
        assert!(adcc.loglik >= dcc.loglik);
    }

    fn fake_fit(loglik: f64, kind: DccKind) -> DccFit {
        DccFit {
            kind,
            a: 0.0,
            b: 0.0,
            g: 0.0,
            o_bar: DMatrix::identity(1, 1),
            n_bar: DMatrix::zeros(1, 1),
            loglik,
            corr_loglik: 0.0,
            garch: vec![Garch11Params { omega: 1.0, alpha: 0.0, beta: 0.0 }],
            last_e: DVector::zeros(1),
            last_h: DVector::from_element(1, 1.0),
            last_xi: DVector::zeros(1),
            last_o: DMatrix::identity(1, 1),
            converged: true,
            fallback: false,
            garch_fallback: false,
        }
    }

    #[test]
    fn select_best_rules() {
        let d = fake_fit(-100.0, DccKind::Dcc);
        let a = fake_fit(-99.0, DccKind::Adcc);
        assert_eq!(select_best(&d, &a).kind, DccKind::Adcc);
        let a = fake_fit(-100.0, DccKind::Adcc);
        assert_eq!(select_best(&d, &a).kind, DccKind::Dcc);
    }

    #[test]
    fn forecast_reductions() {
        // a = b = 0 with unit variances: Omega = Obar.
        let mut fit = fake_fit(0.0, DccKind::Dcc);
        fit.o_bar = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]);
        fit.n_bar = DMatrix::zeros(2, 2);
        fit.last_o = fit.o_bar.clone();
        fit.garch = vec![Garch11Params { omega: 1.0, alpha: 0.0, beta: 0.0 }; 2];
        fit.last_e = DVector::from_vec(vec![0.5, -1.0]);
        fit.last_h = DVector::from_vec(vec![1.0, 1.0]);
        fit.last_xi = DVector::from_vec(vec![0.5, -1.0]);
        let f = forecast_covariance(&fit).unwrap();
        assert!((f.omega - &fit.o_bar).abs().max() < 1e-15);

        // N = 1 reduces to the scalar GARCH forecast.
        let mut one = fake_fit(0.0, DccKind::Dcc);
        one.a = 0.05;
        one.b = 0.9;
        one.garch = vec![Garch11Params { omega: 0.1, alpha: 0.1, beta: 0.8 }];
        one.last_e = DVector::from_element(1, 2.0);
        one.last_h = DVector::from_element(1, 1.5);
        one.last_xi = DVector::from_element(1, 2.0 / 1.5f64.sqrt());
        let f = forecast_covariance(&one).unwrap();
        assert!((f.omega[(0, 0)] - (0.1 + 0.1 * 4.0 + 0.8 * 1.5)).abs() < 1e-14);
    }

    #[test]
    fn forecast_matches_brute_force_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut res = simulate_dcc(0.05, 0.9, 0.3, 250, &mut rng);
        // Add a third asset.
        let extra = simulate_garch(Garch11Params { omega: 0.1, alpha: 0.1, beta: 0.8 }, 250, &mut rng);
        res = res
            .into_iter()
            .zip(extra)
            .map(|(v, x)| DVector::from_vec(vec![v[0], v[1], 0.5 * v[0] + x]))
            .collect();
        let fit = fit_dcc(&res, DccKind::Adcc).unwrap();
        let f = forecast_covariance(&fit).unwrap();

        // Oracle: recompute everything from the fitted parameters with dense algebra.
        let t = res.len();
        let n = 3;
        let mut h_all = vec![vec![0.0; n]; t];
        let mut h_next = vec![0.0; n];
        for i in 0..n {
            let col: Vec<f64> = res.iter().map(|v| v[i]).collect();
            let s2 = col.iter().map(|v| v * v).sum::<f64>() / t as f64;
            let gp = fit.garch[i];
            let mut h = gp.omega + gp.alpha * s2 + gp.beta * s2;
            for r in 0..t {
                h_all[r][i] = h;
                h = gp.omega + gp.alpha * col[r] * col[r] + gp.beta * h;
            }
            h_next[i] = h;
        }
        let xi: Vec<DVector<f64>> = (0..t).map(|r| DVector::from_fn(n, |i, _| res[r][i] / h_all[r][i].sqrt())).collect();
        let neg = |v: &DVector<f64>| v.map(|x| x.min(0.0));
        let mut s = DMatrix::zeros(n, n);
        let mut nb = DMatrix::zeros(n, n);
        for x in &xi {
            s += x * x.transpose();
            nb += neg(x) * neg(x).transpose();
        }
        s /= t as f64;
        nb /= t as f64;
        let d = DMatrix::from_diagonal(&s.diagonal().map(|v| 1.0 / v.sqrt()));
        let o_bar = &d * &s * &d;
        let mut o = o_bar.clone();
        for x in &xi {
            o = &o_bar * (1.0 - fit.a - fit.b) - &nb * fit.g + x * x.transpose() * fit.a + &o * fit.b + neg(x) * neg(x).transpose() * fit.g;
        }
        let dd = DMatrix::from_diagonal(&o.diagonal().map(|v| 1.0 / v.sqrt()));
        let p = &dd * &o * &dd;
        let hs = DMatrix::from_diagonal(&DVector::from_vec(h_next.iter().map(|v| v.sqrt()).collect()));
        let oracle = &hs * p * &hs;
        assert!((f.omega - oracle).abs().max() < 1e-10);
    }

    #[test]
    fn refilter_on_same_window_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let res = simulate_dcc(0.05, 0.9, 0.3, 200, &mut rng);
        let (dcc, _) = fit_dcc_pair(&res).unwrap();
        let again = refilter(&dcc, &res).unwrap();
        assert_eq!(again.last_o, dcc.last_o);
        assert_eq!(again.last_h, dcc.last_h);
        assert_eq!(again.loglik, dcc.loglik);
    }

    #[test]
    fn jump_scaling() {
        let om = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert_eq!(scale_covariance_by_jump(&om, &DMatrix::identity(2, 2)).unwrap(), om);
        let s = scale_covariance_by_jump(&DMatrix::identity(2, 2), &(DMatrix::identity(2, 2) * 4.0)).unwrap();
        assert!((s - DMatrix::identity(2, 2) * 0.25).abs().max() < 1e-15);
        let br = DMatrix::from_diagonal(&nalgebra::dvector![0.5, 3.0]);
        let s = scale_covariance_by_jump(&om, &br).unwrap();
        assert!((s.determinant() - om.determinant() / br.determinant()).abs() < 1e-12);
    }
}

#[cfg(test)]
mod selection_monte_carlo {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::tests::simulate_dcc;
    use super::*;

    // With g = 0 in the data the g >= 0 bound binds in only about half the
    // samples (the likelihood-ratio statistic is a 50:50 mixture of 0 and
    // chi-square(1)), so a strict comparison picks DCC close to half the time.
    // Measured rate: 24/50.
    #[test]
    #[ignore = "unattainable under strict loglik comparison; DCC wins about 50% of symmetric samples"]
    fn symmetric_data_mostly_selects_dcc() {
        let mut dcc_wins = 0;
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let res = simulate_dcc(0.05, 0.90, 0.4, 1000, &mut rng);
            let (dcc, adcc) = fit_dcc_pair(&res).unwrap();
            if select_best(&dcc, &adcc).kind == DccKind::Dcc {
                dcc_wins += 1;
            }
        }
        eprintln!("DCC selected in {dcc_wins}/50");
        assert!(dcc_wins >= 40, "DCC selected in {dcc_wins}/50");
    }
}
