//! Reduced conditional SVD: given symmetric PSD `A` and `B`, find `H` with
//! `A = H B H^T`.
//!
//! Both matrices are eigen-decomposed with eigenvalues sorted descending and
//! eigenvectors sign-normalized, then `H = U_A (S_A / S_B)^{1/2} U_B^T`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, PSD_TOL};

#[derive(Debug, Clone, Serialize)]
pub struct CondSvdResult {
    #[serde(skip)]
    pub h: DMatrix<f64>,
    /// `||H B H^T - A||_F / ||A||_F`, measured against the unfloored `B`.
    pub residual: f64,
    /// Some eigenvalue of `B` was raised to `floor_used`.
    pub regularized: bool,
    pub floor_used: f64,
    /// Number of eigen-directions of `B` that hit the floor.
    pub floored_directions: usize,
}

fn clipped_spectrum(m: &DMatrix<f64>, name: &str) -> Result<linalg::SortedEigen> {
    let mut eig = linalg::sorted_eigen(m);
    let scale = eig.values.first().map(|v| v.abs()).unwrap_or(0.0).max(1.0);
    for v in eig.values.iter_mut() {
        if *v < -PSD_TOL * scale {
            return Err(Error::NotPsd {
                name: name.to_string(),
                min_eigenvalue: *v,
            });
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

/// Solve `A = H B H^T`. `floor` defaults to `max(1e-12, 1e-10 * tr(B) / N)`.
pub fn conditional_svd(a: &DMatrix<f64>, b: &DMatrix<f64>, floor: Option<f64>) -> Result<CondSvdResult> {
    linalg::check_finite(a, "A")?;
    linalg::check_finite(b, "B")?;
    linalg::check_symmetric(a, "A")?;
    linalg::check_symmetric(b, "B")?;
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "A is {}x{} but B is {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let n = a.nrows();
    let ea = clipped_spectrum(a, "A")?;
    let eb = clipped_spectrum(b, "B")?;
    let floor = floor.unwrap_or_else(|| linalg::default_floor(b));
    if !(floor > 0.0) {
        return Err(Error::InvalidInput(format!("floor must be positive, got {floor}")));
    }

    let mut floored = 0;
    let ratio: Vec<f64> = ea
        .values
        .iter()
        .zip(&eb.values)
        .map(|(&sa, &sb)| {
            let sb = if sb < floor {
                floored += 1;
                floor
            } else {
                sb
            };
            (sa / sb).sqrt()
        })
        .collect();

    let mut scaled = ea.vectors.clone();
    for (j, r) in ratio.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*r);
    }
    let h = scaled * eb.vectors.transpose();

    let recon = &h * b * h.transpose();
    let residual = linalg::rel_frobenius(&recon, a);
    if floored > 0 {
        log::debug!("conditional SVD: {floored} of {n} directions of B floored at {floor:e}");
    }
    Ok(CondSvdResult {
        h,
        residual,
        regularized: floored > 0,
        floor_used: floor,
        floored_directions: floored,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    pub(crate) fn random_psd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let x = DMatrix::from_fn(n, n + 3, |_, _| rng.random_range(-1.0..1.0));
        &x * x.transpose()
    }

    #[test]
    fn equal_inputs_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 2..=6 {
            let a = random_psd(n, &mut rng);
            let r = conditional_svd(&a, &a, None).unwrap();
            assert!((r.h.clone() - DMatrix::identity(n, n)).abs().max() < 1e-10);
            assert!(r.residual < 1e-12);
        }
    }

    #[test]
    fn diagonal_analytic_case() {
        let a = DMatrix::from_diagonal(&nalgebra::dvector![4.0, 1.0]);
        let b = DMatrix::identity(2, 2);
        let r = conditional_svd(&a, &b, None).unwrap();
        let expected = DMatrix::from_diagonal(&nalgebra::dvector![2.0, 1.0]);
        assert!((r.h - expected).abs().max() < 1e-14);
    }

    #[test]
    fn random_pairs_reconstruct() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n = rng.random_range(2..=8);
            let a = random_psd(n, &mut rng);
            let b = random_psd(n, &mut rng);
            let r = conditional_svd(&a, &b, None).unwrap();
            // Independent check of the reported residual.
            let recon = &r.h * &b * r.h.transpose();
            let res = (recon - &a).norm() / a.norm();
            assert!(res < 1e-8, "residual {res}");
            assert!(!r.regularized);
        }
    }

    #[test]
    fn singular_b_is_floored_and_flagged() {
        let a = DMatrix::identity(2, 2);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let r = conditional_svd(&a, &b, None).unwrap();
        assert!(r.regularized);
        assert_eq!(r.floored_directions, 1);
        assert!(r.h.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_mismatch_and_asymmetry() {
        let a = DMatrix::identity(2, 2);
        let b = DMatrix::identity(3, 3);
        assert!(matches!(conditional_svd(&a, &b, None), Err(Error::Dimension(_))));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 1.0]);
        assert!(matches!(
            conditional_svd(&asym, &a, None),
            Err(Error::NotSymmetric { .. })
        ));
    }

    #[test]
    fn diagonal_inputs_give_sqrt_ratios() {
        let a = DMatrix::from_diagonal(&nalgebra::dvector![9.0, 4.0, 1.0]);
        let b = DMatrix::from_diagonal(&nalgebra::dvector![3.0, 2.0, 0.5]);
        let r = conditional_svd(&a, &b, None).unwrap();
        let expected = DMatrix::from_diagonal(&nalgebra::dvector![3.0_f64.sqrt(), 2.0_f64.sqrt(), 2.0_f64.sqrt()]);
        assert!((r.h - expected).abs().max() < 1e-12);
    }

    #[test]
    fn deterministic_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_psd(5, &mut rng);
        let b = random_psd(5, &mut rng);
        let r1 = conditional_svd(&a, &b, None).unwrap();
        let r2 = conditional_svd(&a, &b, None).unwrap();
        assert_eq!(r1.h, r2.h);
    }

    proptest! {
        #[test]
        fn scaling_a_scales_h_by_sqrt(seed in 0u64..1000, c in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(2..=6);
            let a = random_psd(n, &mut rng);
            let b = random_psd(n, &mut rng);
            let h1 = conditional_svd(&a, &b, None).unwrap().h;
            let h2 = conditional_svd(&(&a * c), &b, None).unwrap().h;
            let diff = (h2 - h1 * c.sqrt()).norm();
            prop_assert!(diff < 1e-8 * c.sqrt().max(1.0) * 10.0);
        }
    }
}
