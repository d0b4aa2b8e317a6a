//! Small dense linear-algebra helpers shared by the numeric modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Thin singular value decomposition `a = u diag(s) v_t`.
pub(crate) struct Svd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v_t: DMatrix<f64>,
}

fn to_faer(a: &DMatrix<f64>) -> faer::Mat<f64> {
    faer::Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

/// Thin SVD, computed with faer.
pub(crate) fn svd(a: &DMatrix<f64>) -> Result<Svd> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("SVD of a matrix with non-finite entries".into()));
    }
    let f = to_faer(a)
        .thin_svd()
        .map_err(|e| Error::Numeric(format!("SVD did not converge: {e:?}")))?;
    let (u, s, v) = (f.U(), f.S(), f.V());
    let k = s.dim();
    Ok(Svd {
        u: DMatrix::from_fn(a.nrows(), k, |i, j| u[(i, j)]),
        s: DVector::from_fn(k, |i, _| s[i]),
        v_t: DMatrix::from_fn(k, a.ncols(), |i, j| v[(j, i)]),
    })
}

pub(crate) fn singular_values(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    to_faer(a)
        .singular_values()
        .map_err(|e| Error::Numeric(format!("SVD did not converge: {e:?}")))
}

/// Left singular vectors and singular values of `a`, ordered by decreasing
/// singular value, with each vector's largest-magnitude entry made positive.
pub(crate) fn left_singular(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let Svd { u, s, .. } = svd(a)?;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));
    let mut out = DMatrix::zeros(u.nrows(), order.len());
    for (k, &src) in order.iter().enumerate() {
        let mut col = u.column(src).into_owned();
        fix_sign(&mut col);
        out.set_column(k, &col);
    }
    Ok((out, order.iter().map(|&i| s[i]).collect()))
}

/// Flips `v` so that its largest-magnitude entry is positive.
pub(crate) fn fix_sign(v: &mut DVector<f64>) -> bool {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if !v.is_empty() && v[best] < 0.0 {
        v.neg_mut();
        true
    } else {
        false
    }
}

/// Inverse square root of a symmetric positive definite matrix.
pub(crate) fn sym_inv_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(a.clone());
    if eig.eigenvalues.iter().any(|&l| l <= 0.0 || !l.is_finite()) {
        return Err(Error::Numeric("matrix is not positive definite".into()));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Least-squares solve of `a x = b` through a thin QR factorization.
/// Fails when `a` is numerically rank deficient.
pub(crate) fn lstsq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() < a.ncols() {
        return Err(Error::Degenerate(format!(
            "least squares with {} rows for {} unknowns",
            a.nrows(),
            a.ncols()
        )));
    }
    let qr = a.clone().qr();
    let r = qr.r();
    let diag_max = r.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diag_min = r.diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if diag_max == 0.0 || diag_min <= 1e-12 * diag_max {
        return Err(Error::Degenerate("design matrix is numerically singular".into()));
    }
    let qtb = qr.q().transpose() * b;
    r.solve_upper_triangular(&qtb)
        .ok_or_else(|| Error::Degenerate("triangular solve failed".into()))
}

/// Minimum-norm least-squares solution via SVD; also reports whether the
/// matrix was rank deficient at the given relative tolerance.
pub(crate) fn pinv_solve(a: &DMatrix<f64>, b: &DMatrix<f64>, rtol: f64) -> Result<(DMatrix<f64>, bool)> {
    let Svd { u, s, v_t } = svd(a)?;
    let smax = s.iter().fold(0.0f64, |m, v| m.max(*v));
    let eps = rtol * smax;
    let deficient = s.len() < a.ncols() || s.iter().any(|&v| v <= eps);
    let inv = s.map(|v| if v > eps { 1.0 / v } else { 0.0 });
    let x = v_t.transpose() * DMatrix::from_diagonal(&inv) * u.transpose() * b;
    Ok((x, deficient))
}

/// Column means of `a` removed from every row.
pub(crate) fn center_columns(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = a.clone();
    for j in 0..a.ncols() {
        let mean = a.column(j).mean();
        out.column_mut(j).add_scalar_mut(-mean);
    }
    out
}

/// Row means of `a` removed from every column.
pub(crate) fn center_rows(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = a.clone();
    for i in 0..a.nrows() {
        let mean = a.row(i).mean();
        out.row_mut(i).add_scalar_mut(-mean);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn svd_reconstructs_rank_deficient_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let n = rng.random_range(2..=8);
            let rank = rng.random_range(1..=n);
            let c = n + rng.random_range(0..3);
            let a = DMatrix::from_fn(n, rank, |_, _| rng.random_range(-2.0..2.0));
            let b = DMatrix::from_fn(rank, c, |_, _| rng.random_range(-2.0..2.0));
            let m = a * b;
            let Svd { u, s, v_t } = svd(&m).unwrap();
            let back = &u * DMatrix::from_diagonal(&s) * &v_t;
            assert!((back - &m).amax() < 1e-12 * m.amax().max(1.0));
            let k = s.len();
            assert!((u.transpose() * &u - DMatrix::identity(k, k)).amax() < 1e-12);
            assert!((&v_t * v_t.transpose() - DMatrix::identity(k, k)).amax() < 1e-12);
            assert!(s.as_slice().windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
