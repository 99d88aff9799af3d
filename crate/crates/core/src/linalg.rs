//! Dense solves shared by the ridge cascade and the binary-feature learner.

use nalgebra::{DMatrix, SVD};

use crate::error::{Error, Result};

/// Solves `G X = B` for symmetric `G` via Cholesky, falling back to full-pivot
/// LU when `G` is not numerically positive definite. A singular `G` is an error.
pub fn spd_solve(g: DMatrix<f64>, b: &DMatrix<f64>, gamma: f64) -> Result<DMatrix<f64>> {
    let n = g.nrows();
    if let Some(l) = cholesky(&g) {
        let (lo, hi) = (0..n).fold((f64::INFINITY, 0.0f64), |(lo, hi), i| {
            let d = l[(i, i)] * l[(i, i)];
            (lo.min(d), hi.max(d))
        });
        if lo > hi * 1e-13 * n as f64 {
            let y = l.solve_lower_triangular(b);
            if let Some(x) = y.and_then(|y| l.tr_solve_lower_triangular(&y)) {
                if x.iter().all(|v| v.is_finite()) {
                    return Ok(x);
                }
            }
        }
    }
    let lu = g.full_piv_lu();
    let u = lu.u();
    let diag: Vec<f64> = (0..n).map(|i| u[(i, i)].abs()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if n == 0 || max == 0.0 || min <= max * 1e-13 * n as f64 {
        return Err(Error::RankDeficient { size: n, gamma });
    }
    let x = lu.solve(b).ok_or(Error::RankDeficient { size: n, gamma })?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("linear solve"));
    }
    Ok(x)
}

/// Ridge descent map `R = X Φᵀ (Φ Φᵀ + γ I)⁻¹`.
///
/// `targets` is `q x n` (one column per training sample), `features` is
/// `m x n`. When `m > n` the equivalent `n x n` system
/// `R = X (Φᵀ Φ + γ I)⁻¹ Φᵀ` is solved instead.
pub fn ridge(targets: &DMatrix<f64>, features: &DMatrix<f64>, gamma: f64) -> Result<DMatrix<f64>> {
    let (m, n) = features.shape();
    if targets.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "targets have {} columns, features {}",
            targets.ncols(),
            n
        )));
    }
    if n == 0 {
        return Err(Error::EmptyInput("ridge regression needs at least one sample"));
    }
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidParameter(format!("gamma {gamma}")));
    }
    if m <= n {
        let mut g = gram(features);
        for i in 0..m {
            g[(i, i)] += gamma;
        }
        let rhs = features * targets.transpose();
        Ok(spd_solve(g, &rhs, gamma)?.transpose())
    } else {
        if gamma == 0.0 {
            // Φ Φᵀ has rank at most n < m
            return Err(Error::RankDeficient { size: m, gamma });
        }
        let mut k = gram(&features.transpose());
        for i in 0..n {
            k[(i, i)] += gamma;
        }
        let y = spd_solve(k, &targets.transpose(), gamma)?;
        Ok((features * y).transpose())
    }
}

/// Lower Cholesky factor of a symmetric matrix (only the lower triangle is
/// read), blocked so the bulk of the work is matrix products. `None` when a
/// pivot is not positive.
pub fn cholesky(g: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    const BLOCK: usize = 96;
    let n = g.nrows();
    let mut a = g.clone();
    for k in (0..n).step_by(BLOCK) {
        let b = BLOCK.min(n - k);
        let l11 = a.view((k, k), (b, b)).clone_owned().cholesky()?.unpack();
        a.view_mut((k, k), (b, b)).copy_from(&l11);
        let rest = n - k - b;
        if rest == 0 {
            continue;
        }
        // L21 = A21 L11⁻ᵀ
        let l21 = l11.solve_lower_triangular(&a.view((k + b, k), (rest, b)).transpose())?.transpose();
        a.view_mut((k + b, k), (rest, b)).copy_from(&l21);
        a.view_mut((k + b, k + b), (rest, rest)).gemm(-1.0, &l21, &l21.transpose(), 1.0);
    }
    for j in 1..n {
        a.view_mut((0, j), (j, 1)).fill(0.0);
    }
    Some(a)
}

/// `A Aᵀ`, computing each off-diagonal block once and mirroring it.
pub fn gram(a: &DMatrix<f64>) -> DMatrix<f64> {
    let m = a.nrows();
    let block = m.div_ceil(4).max(256);
    // row blocks of A are contiguous columns of Aᵀ
    let at = a.transpose();
    let mut g = DMatrix::zeros(m, m);
    for i in (0..m).step_by(block) {
        let bi = block.min(m - i);
        let ai = at.columns(i, bi).transpose();
        for j in (i..m).step_by(block) {
            let bj = block.min(m - j);
            let prod = &ai * at.columns(j, bj);
            g.view_mut((i, j), (bi, bj)).copy_from(&prod);
            if j != i {
                g.view_mut((j, i), (bj, bi)).copy_from(&prod.transpose());
            }
        }
    }
    g
}

/// Moore–Penrose pseudoinverse via SVD, with singular values below
/// `rcond * σ_max` treated as zero.
pub fn pinv(a: &DMatrix<f64>, rcond: f64) -> Result<DMatrix<f64>> {
    let svd = SVD::new(a.clone(), true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = (rcond * smax).max(f64::MIN_POSITIVE);
    svd.pseudo_inverse(tol)
        .map_err(|e| Error::DimensionMismatch(format!("pseudoinverse: {e}")))
}

/// Squared Frobenius norm.
pub fn frob2(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|v| v * v).sum()
}
