//! Small dense linear-algebra helpers shared by the numerical modules.
//!
//! Everything here works on `nalgebra::DMatrix<f64>`; the matrices in this
//! crate are at most a few dozen rows, so clarity wins over blocking tricks.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Absolute tolerance used when deciding whether a matrix is symmetric,
/// scaled by the largest entry magnitude (or 1 for tiny matrices).
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Eigenvalues above `-PSD_TOL * scale` are treated as round-off and clipped to 0.
pub const PSD_TOL: f64 = 1e-10;

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted
/// descending and each eigenvector's largest-magnitude entry made positive.
#[derive(Debug, Clone)]
pub struct SortedEigen {
    pub values: Vec<f64>,
    /// Eigenvectors as columns, in the same order as `values`.
    pub vectors: DMatrix<f64>,
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn check_square(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "`{name}` is {}x{}, expected square",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

pub fn check_symmetric(m: &DMatrix<f64>, name: &str) -> Result<()> {
    check_square(m, name)?;
    let asym = asymmetry(m);
    if asym > SYMMETRY_TOL * max_abs(m).max(1.0) {
        return Err(Error::NotSymmetric {
            name: name.to_string(),
            asymmetry: asym,
        });
    }
    Ok(())
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn check_finite(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("`{name}` has non-finite entries")))
    }
}

/// Sorted, sign-normalized symmetric eigen-decomposition.
pub fn sorted_eigen(m: &DMatrix<f64>) -> SortedEigen {
    let n = m.nrows();
    let eig = symmetrize(m).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps the solver's order for exact ties.
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut vectors = DMatrix::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        values.push(eig.eigenvalues[src]);
        let col = eig.eigenvectors.column(src);
        let mut pivot = 0;
        for i in 1..n {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors[(i, dst)] = sign * col[i];
        }
    }
    SortedEigen { values, vectors }
}

/// Default eigenvalue floor: `max(1e-12, 1e-10 * trace / n)`.
pub fn default_floor(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows().max(1) as f64;
    (1e-10 * m.trace() / n).max(1e-12)
}

/// Reassemble `V diag(values) V^T`.
pub fn from_eigen(vectors: &DMatrix<f64>, values: &[f64]) -> DMatrix<f64> {
    let d = DVector::from_column_slice(values);
    let scaled = vectors * DMatrix::from_diagonal(&d);
    symmetrize(&(scaled * vectors.transpose()))
}

/// Inverse of a symmetric PSD matrix through its eigen-decomposition, with
/// eigenvalues below `floor` raised to it. Returns the inverse and whether the
/// floor was applied.
pub fn sym_inverse_floored(m: &DMatrix<f64>, name: &str, floor: f64) -> Result<(DMatrix<f64>, bool)> {
    check_finite(m, name)?;
    check_symmetric(m, name)?;
    let eig = sorted_eigen(m);
    let top = eig.values.first().copied().unwrap_or(0.0);
    if !(top > 0.0) {
        return Err(Error::Singular {
            name: name.to_string(),
            detail: "largest eigenvalue is not positive".into(),
        });
    }
    let min = eig.values.last().copied().unwrap_or(0.0);
    if min < -PSD_TOL * top.max(1.0) {
        return Err(Error::NotPsd {
            name: name.to_string(),
            min_eigenvalue: min,
        });
    }
    let mut regularized = false;
    let inv: Vec<f64> = eig
        .values
        .iter()
        .map(|&v| {
            if v < floor {
                regularized = true;
                1.0 / floor
            } else {
                1.0 / v
            }
        })
        .collect();
    Ok((from_eigen(&eig.vectors, &inv), regularized))
}

/// Clip negative eigenvalues to zero. Returns the repaired matrix and whether
/// anything was clipped beyond round-off.
pub fn clip_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let eig = sorted_eigen(m);
    let top = eig.values.first().copied().unwrap_or(0.0).abs().max(1e-300);
    if eig.values.iter().all(|&v| v >= 0.0) {
        return (symmetrize(m), false);
    }
    let clipped = eig.values.iter().any(|&v| v < -PSD_TOL * top);
    let values: Vec<f64> = eig.values.iter().map(|&v| v.max(0.0)).collect();
    (from_eigen(&eig.vectors, &values), clipped)
}

/// General inverse through LU; errors name the matrix.
pub fn inverse(m: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    check_square(m, name)?;
    m.clone().try_inverse().ok_or_else(|| Error::Singular {
        name: name.to_string(),
        detail: "LU factorization found a zero pivot".into(),
    })
}

/// `diag(d_i^power)` for a diagonal matrix with positive entries.
pub fn diag_power(m: &DMatrix<f64>, power: f64, name: &str) -> Result<DMatrix<f64>> {
    check_square(m, name)?;
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        let d = m[(i, i)];
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Domain(format!(
                "`{name}` diagonal entry {i} = {d} is not positive"
            )));
        }
        out[(i, i)] = d.powf(power);
    }
    Ok(out)
}

/// Relative Frobenius distance `||a - b|| / ||b||` (absolute when `b` is zero).
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let diff = (a - b).norm();
    let scale = b.norm();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Mean vector and (population or sample) covariance of the rows of `x`.
pub fn row_covariance(x: &DMatrix<f64>, sample: bool) -> (DVector<f64>, DMatrix<f64>) {
    let (n, k) = x.shape();
    let mut mean = DVector::zeros(k);
    for r in 0..n {
        for c in 0..k {
            mean[c] += x[(r, c)];
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(k, k);
    for r in 0..n {
        for i in 0..k {
            let di = x[(r, i)] - mean[i];
            for j in i..k {
                cov[(i, j)] += di * (x[(r, j)] - mean[j]);
            }
        }
    }
    let denom = if sample { (n as f64 - 1.0).max(1.0) } else { n as f64 };
    for i in 0..k {
        for j in i..k {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (mean, cov)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sorted_eigen_orders_and_signs() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 1.0]);
        let e = sorted_eigen(&m);
        assert_eq!(e.values, vec![5.0, 2.0, 1.0]);
        for c in 0..3 {
            let col = e.vectors.column(c);
            let max = col.iter().cloned().fold(f64::MIN, f64::max);
            assert!(max > 0.0);
        }
        assert!((e.vectors[(1, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn floored_inverse_flags_singular_direction() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (inv, reg) = sym_inverse_floored(&m, "m", default_floor(&m)).unwrap();
        assert!(reg);
        assert!(inv.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_asymmetric() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(check_symmetric(&m, "m"), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn clip_psd_removes_negative_eigenvalues() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let (fixed, clipped) = clip_psd(&m);
        assert!(clipped);
        let e = sorted_eigen(&fixed);
        assert!(e.values.iter().all(|&v| v >= -1e-12));
    }
}
