//! Lawson-Hanson nonnegative least squares, with optional unconstrained entries.

use nalgebra::{DMatrix, DVector};

use super::linalg::lstsq;

/// `argmin ||a x - b||` subject to `x_j >= 0` wherever `free[j]` is false.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>, free: &[bool]) -> DVector<f64> {
    assert_eq!(free.len(), a.ncols());
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    if n == 0 {
        return x;
    }
    let scale = a.amax().max(1e-300) * b.amax().max(1.0);
    let tol = 1e-12 * scale * (a.nrows().max(n) as f64);
    // free variables stay in the passive set throughout
    let mut passive = free.to_vec();
    let mut first = passive.iter().any(|p| *p);
    for _ in 0..(3 * n + 10) {
        if !first {
            let w = a.tr_mul(&(b - a * &x));
            let candidate = (0..n)
                .filter(|&j| !passive[j])
                .max_by(|&i, &j| w[i].total_cmp(&w[j]));
            match candidate {
                Some(j) if w[j] > tol => passive[j] = true,
                _ => break,
            }
        }
        first = false;
        loop {
            let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let s_p = lstsq(&a.select_columns(&idx), b);
            let ok = idx
                .iter()
                .zip(s_p.iter())
                .all(|(&j, v)| free[j] || *v > 0.0);
            if ok {
                x.fill(0.0);
                for (k, &j) in idx.iter().enumerate() {
                    x[j] = s_p[k];
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (k, &j) in idx.iter().enumerate() {
                if !free[j] && s_p[k] <= 0.0 {
                    let denom = x[j] - s_p[k];
                    alpha = if denom > 0.0 { alpha.min(x[j] / denom) } else { 0.0 };
                }
            }
            for (k, &j) in idx.iter().enumerate() {
                x[j] += alpha * (s_p[k] - x[j]);
                if !free[j] && x[j] <= 1e-15 * scale {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
        }
    }
    x
}
