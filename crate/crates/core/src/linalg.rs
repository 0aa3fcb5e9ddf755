//! Small dense helpers shared by the Gaussian machinery.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Relative eigenvalue floor below which a matrix is not accepted as SPD.
pub const SPD_TOLERANCE: f64 = 1e-10;

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    m.clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

pub fn chol_log_det(ch: &Cholesky<f64, Dyn>) -> f64 {
    let l = ch.l_dirty();
    (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
}

/// Inverse of an SPD matrix, symmetrized against round-off drift.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let mut inv = cholesky(m, what)?.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

pub fn spd_log_det(m: &DMatrix<f64>, what: &str) -> Result<f64> {
    Ok(chol_log_det(&cholesky(m, what)?))
}

/// Accepts `m` as SPD when symmetric and its smallest eigenvalue exceeds
/// `-SPD_TOLERANCE * largest`, returning the symmetrized copy. A Cholesky
/// factorization must also succeed so downstream solves are well defined.
pub fn validate_spd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(Error::InvalidParameter(format!("`{what}` must be a non-empty square matrix")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(format!("`{what}` has non-finite entries")));
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let asym = (m - m.transpose()).amax();
    if asym > 1e-8 * scale {
        return Err(Error::InvalidParameter(format!("`{what}` is not symmetric")));
    }
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = sym.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if max <= 0.0 || min <= -SPD_TOLERANCE * max || sym.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite(what.to_string()));
    }
    Ok(sym)
}

pub fn submatrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

pub fn subvector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |i, _| v[idx[i]])
}

pub fn standard_normal_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Draws from MVN(mean, precision⁻¹) given the Cholesky factor of the precision.
/// With precision = L Lᵀ, `mean + L⁻ᵀ z` has covariance (L Lᵀ)⁻¹.
pub fn sample_mvn_precision_chol<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    precision_chol: &Cholesky<f64, Dyn>,
    rng: &mut R,
) -> DVector<f64> {
    let z = standard_normal_vector(mean.len(), rng);
    let l = precision_chol.l_dirty();
    let x = l
        .tr_solve_lower_triangular(&z)
        .expect("Cholesky factor has a positive diagonal");
    mean + x
}

pub fn sample_mvn_precision<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    precision: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let ch = cholesky(precision, "conditional precision")?;
    Ok(sample_mvn_precision_chol(mean, &ch, rng))
}

/// Maximum absolute column sum.
pub fn norm_1(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Condition number of an SPD matrix from its eigenvalues.
pub fn spd_condition(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Log-density of MVN(mean, cov) at x, by Cholesky of the covariance.
pub fn mvn_log_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let n = x.len();
    if n == 0 {
        return Ok(0.0);
    }
    let ch = cholesky(cov, "covariance")?;
    let r = x - mean;
    let y = ch
        .l_dirty()
        .solve_lower_triangular(&r)
        .expect("Cholesky factor has a positive diagonal");
    Ok(-0.5 * (n as f64 * LN_2PI + chol_log_det(&ch) + y.norm_squared()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn inverse_and_log_det() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let inv = spd_inverse(&m, "m").unwrap();
        assert_relative_eq!(inv[(0, 0)], 2.0 / 3.0, epsilon = 1e-14);
        assert_relative_eq!(inv[(0, 1)], -1.0 / 3.0, epsilon = 1e-14);
        assert_relative_eq!(spd_log_det(&m, "m").unwrap(), 3f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn validate_rejects_indefinite_and_asymmetric() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(validate_spd(&bad, "bad").is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(validate_spd(&asym, "asym").is_err());
        assert!(validate_spd(&DMatrix::identity(3, 3), "id").is_ok());
    }

    #[test]
    fn precision_sampler_moments() {
        let prec = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0]);
        let cov = spd_inverse(&prec, "p").unwrap();
        let mean = DVector::from_vec(vec![1.0, -2.0]);
        let ch = cholesky(&prec, "p").unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let n = 200_000;
        let mut s = DVector::zeros(2);
        let mut ss = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let x = sample_mvn_precision_chol(&mean, &ch, &mut rng);
            let d = &x - &mean;
            s += &x;
            ss += &d * d.transpose();
        }
        s /= n as f64;
        ss /= n as f64;
        assert!((s - &mean).amax() < 0.01);
        assert!((ss - cov).amax() < 0.01);
    }
}
