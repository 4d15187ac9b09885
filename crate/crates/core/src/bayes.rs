//! Bayesian shrinkage of the intraday covariance toward the DCC forecast.
//!
//! `posterior = Sigma + [(tau Sigma)^{-1} + Omega^{-1}]^{-1}`

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

pub const DEFAULT_TAU: f64 = 1.0;
pub const TAU_RANGE: (f64, f64) = (0.01, 10.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Regular,
    LiquidityAdjusted,
}

impl Pipeline {
    pub fn as_str(self) -> &'static str {
        match self {
            Pipeline::Regular => "regular",
            Pipeline::LiquidityAdjusted => "liquidity_adjusted",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PosteriorRecord {
    pub date: chrono::NaiveDate,
    pub sigma_post: DMatrix<f64>,
    pub tau: f64,
    pub det_post: f64,
    pub pipeline: Pipeline,
}

pub fn check_tau(tau: f64) -> Result<()> {
    if !(tau >= TAU_RANGE.0 && tau <= TAU_RANGE.1) {
        return Err(Error::Config(format!(
            "tau must lie in [{}, {}], got {tau}",
            TAU_RANGE.0, TAU_RANGE.1
        )));
    }
    Ok(())
}

fn floored_inverse(m: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    let (inv, regularized) = linalg::sym_inverse_floored(m, name, linalg::default_floor(m))?;
    if regularized {
        log::debug!("`{name}` was near singular; eigenvalues floored before inversion");
    }
    Ok(inv)
}

/// Posterior covariance. Any `tau > 0` is accepted here; configuration-level
/// range checks live in [`check_tau`].
pub fn posterior_covariance(sigma: &DMatrix<f64>, omega: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Domain(format!("tau must be positive and finite, got {tau}")));
    }
    if sigma.shape() != omega.shape() {
        return Err(Error::Dimension("Sigma and Omega differ in shape".into()));
    }
    let prior_prec = floored_inverse(&(sigma * tau), "prior covariance (tau * Sigma)")?;
    let cond_prec = floored_inverse(omega, "conditional covariance (Omega)")?;
    let added = floored_inverse(&linalg::symmetrize(&(prior_prec + cond_prec)), "posterior precision")?;
    Ok(linalg::symmetrize(&(sigma + added)))
}

/// Closed-form liquidity-adjusted posterior
/// `B_s^{-1} [Sigma + [(tau Sigma)^{-1} + (B_t Omega B_t')^{-1}]^{-1}] B_s^{-T}`
/// with `B_t = B_s B_r^{-1/2}`.
pub fn linked_posterior(
    sigma: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    b_sigma: &DMatrix<f64>,
    b_r: &DMatrix<f64>,
    tau: f64,
) -> Result<DMatrix<f64>> {
    let b_t = crate::liquidity::composite_matrix(b_sigma, b_r)?;
    let scaled_omega = linalg::symmetrize(&(&b_t * omega * b_t.transpose()));
    let inner = posterior_covariance(sigma, &scaled_omega, tau)?;
    let bs_inv = linalg::inverse(b_sigma, "B_sigma")?;
    Ok(linalg::symmetrize(&(&bs_inv * inner * bs_inv.transpose())))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let x = DMatrix::from_fn(n, n + 2, |_, _| rng.random_range(-1.0..1.0));
        &x * x.transpose() + DMatrix::identity(n, n) * 0.05
    }

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn scalar_case_is_one_and_a_half() {
        let p = posterior_covariance(&scalar(1.0), &scalar(1.0), 1.0).unwrap();
        assert_eq!(p[(0, 0)], 1.5);
    }

    #[test]
    fn large_tau_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_spd(3, &mut rng);
        let o = random_spd(3, &mut rng);
        let p = posterior_covariance(&s, &o, 1e12).unwrap();
        let limit = &s + &o;
        assert!(linalg::rel_frobenius(&p, &limit) < 1e-6);
    }

    #[test]
    fn matches_dense_inverse_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_spd(4, &mut rng);
        let o = random_spd(4, &mut rng);
        let p = posterior_covariance(&s, &o, 1.0).unwrap();
        let oracle = &s + (s.clone().try_inverse().unwrap() + o.clone().try_inverse().unwrap())
            .try_inverse()
            .unwrap();
        assert!(linalg::rel_frobenius(&p, &oracle) < 1e-10);
    }

    #[test]
    fn singular_error_names_matrix() {
        let err = posterior_covariance(&DMatrix::zeros(2, 2), &DMatrix::identity(2, 2), 1.0).unwrap_err();
        assert!(err.to_string().contains("prior covariance"), "{err}");
        let err = posterior_covariance(&DMatrix::identity(2, 2), &(DMatrix::identity(2, 2) * -1.0), 1.0).unwrap_err();
        assert!(err.to_string().contains("Omega"), "{err}");
    }

    #[test]
    fn identity_liquidity_reduces_to_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_spd(3, &mut rng);
        let o = random_spd(3, &mut rng);
        let i = DMatrix::identity(3, 3);
        let a = linked_posterior(&s, &o, &i, &i, 1.0).unwrap();
        let b = posterior_covariance(&s, &o, 1.0).unwrap();
        assert!(linalg::rel_frobenius(&a, &b) < 1e-14);
    }

    #[test]
    fn scalar_linked_case() {
        let v = linked_posterior(&scalar(1.0), &scalar(1.0), &scalar(2.0), &scalar(1.0), 1.0).unwrap();
        assert!((v[(0, 0)] - 0.45).abs() < 1e-15);
    }

    fn two_step(s: &DMatrix<f64>, o: &DMatrix<f64>, bs: &DMatrix<f64>, br: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
        let bs_inv = bs.clone().try_inverse().unwrap();
        let s_liq = linalg::symmetrize(&(&bs_inv * s * bs_inv.transpose()));
        let o_liq = crate::dcc::scale_covariance_by_jump(o, br).unwrap();
        posterior_covariance(&s_liq, &o_liq, tau).unwrap()
    }

    #[test]
    fn linked_form_equals_two_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let n = 3;
            let s = random_spd(n, &mut rng);
            let o = random_spd(n, &mut rng);
            let bs = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } + rng.random_range(-0.3..0.3));
            let br = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(n, |_, _| rng.random_range(0.2..5.0)));
            let a = linked_posterior(&s, &o, &bs, &br, 1.0).unwrap();
            let b = two_step(&s, &o, &bs, &br, 1.0);
            assert!(linalg::rel_frobenius(&a, &b) < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn posterior_dominates_prior(seed in 0u64..2000, tau in 0.01f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..=5);
            let s = random_spd(n, &mut rng);
            let o = random_spd(n, &mut rng);
            let p = posterior_covariance(&s, &o, tau).unwrap();
            prop_assert!(p.determinant() >= s.determinant());
            let diff = linalg::sorted_eigen(&(&p - &s));
            prop_assert!(diff.values.iter().all(|v| *v >= -1e-10 * p.norm()));
            prop_assert!(linalg::asymmetry(&p) == 0.0);
        }

        #[test]
        fn scalar_posterior_increases_with_tau(s in 0.01f64..10.0, o in 0.01f64..10.0, t1 in 0.01f64..10.0, t2 in 0.01f64..10.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = posterior_covariance(&scalar(s), &scalar(o), lo).unwrap()[(0, 0)];
            let b = posterior_covariance(&scalar(s), &scalar(o), hi).unwrap()[(0, 0)];
            prop_assert!(b >= a - 1e-15 * b.abs());
        }
    }
}
