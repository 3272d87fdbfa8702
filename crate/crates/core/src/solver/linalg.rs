//! Small dense helpers built on nalgebra's SVD.

use nalgebra::{DMatrix, DVector};

const RANK_EPS: f64 = 1e-10;

fn threshold(sv: &DVector<f64>, rows: usize, cols: usize) -> f64 {
    let smax = sv.iter().copied().fold(0.0, f64::max);
    RANK_EPS * rows.max(cols).max(1) as f64 * smax
}

pub fn rank(a: &DMatrix<f64>) -> usize {
    if a.is_empty() {
        return 0;
    }
    let sv = a.singular_values();
    let tol = threshold(&sv, a.nrows(), a.ncols());
    sv.iter().filter(|s| **s > tol).count()
}

/// Minimum-norm least-squares solution of `a x = b`.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if a.ncols() == 0 {
        return DVector::zeros(0);
    }
    if a.nrows() == 0 {
        return DVector::zeros(a.ncols());
    }
    let svd = a.clone().svd(true, true);
    let tol = threshold(&svd.singular_values, a.nrows(), a.ncols());
    svd.solve(b, tol).expect("both factors were computed")
}

/// Orthonormal basis (as columns) of the null space of `a`, which has `cols` columns.
pub fn null_space(a: &DMatrix<f64>, cols: usize) -> DMatrix<f64> {
    if cols == 0 {
        return DMatrix::zeros(0, 0);
    }
    if a.nrows() == 0 {
        return DMatrix::identity(cols, cols);
    }
    // pad to at least square so the SVD returns a full right factor
    let rows = a.nrows().max(cols);
    let mut padded = DMatrix::zeros(rows, cols);
    padded.view_mut((0, 0), (a.nrows(), cols)).copy_from(a);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested");
    let tol = threshold(&svd.singular_values, a.nrows(), cols);
    let keep: Vec<usize> = (0..cols)
        .filter(|&i| svd.singular_values[i] <= tol)
        .collect();
    let mut z = DMatrix::zeros(cols, keep.len());
    for (k, &i) in keep.iter().enumerate() {
        z.set_column(k, &v_t.row(i).transpose());
    }
    z
}

/// Largest singular value.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    // the Gram matrix on the short side is cheaper to decompose
    let gram = if a.nrows() <= a.ncols() {
        a * a.transpose()
    } else {
        a.transpose() * a
    };
    let ev = gram.symmetric_eigenvalues();
    ev.iter().copied().fold(0.0, f64::max).max(0.0).sqrt()
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}
