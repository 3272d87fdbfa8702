//! Exhaustive reference solver for tiny programs.
//!
//! Works on the explicit matrices `G = A_Omega^T` and `B = A_{Omega^c}^T`. An
//! extreme point of the optimal set is fixed by its support, its sign pattern
//! and a set of tight inequalities: either a vertex (linear system) or the
//! minimizer of a linear function over a slice of the fit ellipsoid (closed
//! form). Every such candidate is generated, filtered for feasibility and the
//! cheapest one wins.

use nalgebra::{DMatrix, DVector};

use super::kkt::{kkt_residuals, FitMultiplier, Multipliers};
use super::linalg::{lstsq, null_space, rank};
use super::nnls::nnls;
use crate::constraints::QcqpData;
use crate::error::{Error, Result};

pub const ORACLE_MAX_VARS: usize = 8;
pub const ORACLE_MAX_SAMPLES: usize = 12;
const MAX_CANDIDATES: f64 = 2e6;

#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub u: DMatrix<f64>,
    pub objective: f64,
    pub multipliers: Multipliers,
}

struct Dense {
    g: DMatrix<f64>,
    b: DMatrix<f64>,
    y: DVector<f64>,
    c: DVector<f64>,
    eps: f64,
    tol: f64,
}

impl Dense {
    fn feasible(&self, u: &DVector<f64>) -> bool {
        let r = (&self.g * u - &self.y).norm();
        if r > self.eps + self.tol {
            return false;
        }
        let w = &self.b * u;
        w.iter().zip(self.c.iter()).all(|(a, c)| *a <= c + self.tol)
    }
}

#[derive(Debug, Clone)]
struct Candidate {
    u: DVector<f64>,
    objective: f64,
    support: Vec<usize>,
    tight: Vec<usize>,
    lambda: Option<f64>,
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Calls `f` on every `k`-subset of `items` in lexicographic order.
fn for_each_subset(items: &[usize], k: usize, f: &mut impl FnMut(&[usize])) {
    let n = items.len();
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    let mut chosen = vec![0usize; k];
    loop {
        for (c, &i) in chosen.iter_mut().zip(&idx) {
            *c = items[i];
        }
        f(&chosen);
        let mut pos = k;
        loop {
            if pos == 0 {
                return;
            }
            pos -= 1;
            if idx[pos] < n - k + pos {
                break;
            }
            if pos == 0 && idx[0] >= n - k {
                return;
            }
        }
        idx[pos] += 1;
        for j in pos + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

fn embed(n: usize, support: &[usize], a: &DVector<f64>) -> DVector<f64> {
    let mut u = DVector::zeros(n);
    for (k, &i) in support.iter().enumerate() {
        u[i] = a[k];
    }
    u
}

fn sub(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    m.select_rows(rows).select_columns(cols)
}

pub fn oracle_solve_tiny(q: &QcqpData) -> Result<OracleSolution> {
    let n = q.n_vars();
    if n > ORACLE_MAX_VARS || q.samples() > ORACLE_MAX_SAMPLES {
        return Err(Error::OracleLimit(format!(
            "{n} variables and {} samples (limits {ORACLE_MAX_VARS} and {ORACLE_MAX_SAMPLES})",
            q.samples()
        )));
    }
    let pat = q.pattern();
    let y = DVector::from_vec(q.y_omega());
    let c = DVector::from_vec(q.c());
    let scale = y.amax().max(c.amax()).max(q.epsilon()).max(1.0);
    let d = Dense {
        g: q.materialize_columns(pat.omega()).transpose(),
        b: q.materialize_columns(pat.omega_c()).transpose(),
        y,
        c,
        eps: q.epsilon(),
        tol: 1e-9 * scale,
    };

    // budget check before doing any work
    let mut budget = 0.0;
    for mask in 0u32..(1 << n) {
        let support: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let rows = (0..d.b.nrows())
            .filter(|&r| support.iter().any(|&i| d.b[(r, i)] != 0.0))
            .count();
        // sign patterns only cost a back-substitution each
        let signs = if d.eps > 0.0 { (1u64 << support.len()) as f64 / 32.0 } else { 0.0 };
        for k in 0..=support.len() {
            budget += binomial(rows, k) * (1.0 + signs);
        }
    }
    if budget > MAX_CANDIDATES {
        return Err(Error::OracleLimit(format!("{budget:.0} candidate faces")));
    }

    let mut cands: Vec<Candidate> = Vec::new();
    let push = |u: DVector<f64>, support: &[usize], tight: &[usize], lambda: Option<f64>, cands: &mut Vec<Candidate>| {
        if d.feasible(&u) {
            let objective = u.iter().map(|v| v.abs()).sum();
            cands.push(Candidate {
                u,
                objective,
                support: support.to_vec(),
                tight: tight.to_vec(),
                lambda,
            });
        }
    };

    for mask in 0u32..(1 << n) {
        let support: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let s = support.len();
        if s == 0 {
            push(DVector::zeros(n), &[], &[], None, &mut cands);
            continue;
        }
        let rows: Vec<usize> = (0..d.b.nrows())
            .filter(|&r| support.iter().any(|&i| d.b[(r, i)] != 0.0))
            .collect();
        let g_s = d.g.select_columns(&support);
        for k in 0..=s.min(rows.len()) {
            for_each_subset(&rows, k, &mut |tight: &[usize]| {
                let b_js = sub(&d.b, tight, &support);
                let c_j = DVector::from_iterator(k, tight.iter().map(|&r| d.c[r]));
                if d.eps == 0.0 {
                    let mut sys = DMatrix::zeros(g_s.nrows() + k, s);
                    sys.view_mut((0, 0), g_s.shape()).copy_from(&g_s);
                    sys.view_mut((g_s.nrows(), 0), (k, s)).copy_from(&b_js);
                    if rank(&sys) != s {
                        return;
                    }
                    let mut rhs = DVector::zeros(sys.nrows());
                    rhs.rows_mut(0, d.y.len()).copy_from(&d.y);
                    rhs.rows_mut(d.y.len(), k).copy_from(&c_j);
                    let a = lstsq(&sys, &rhs);
                    if (&sys * &a - &rhs).norm() <= d.tol {
                        push(embed(n, &support, &a), &support, tight, None, &mut cands);
                    }
                    return;
                }
                let rk = rank(&b_js);
                if rk != k {
                    return;
                }
                if k == s {
                    let a = lstsq(&b_js, &c_j);
                    push(embed(n, &support, &a), &support, tight, Some(0.0), &mut cands);
                    return;
                }
                // linear objective over the ellipsoid slice, one sign pattern at a time
                let a_p = lstsq(&b_js, &c_j);
                let z = null_space(&b_js, s);
                let f = &g_s * &z;
                let h = f.tr_mul(&f);
                let Some(chol) = h.clone().cholesky() else { return };
                let r0 = &g_s * &a_p - &d.y;
                let t0 = chol.solve(&(-f.tr_mul(&r0)));
                let r_perp = &f * &t0 + &r0;
                let rho2 = d.eps * d.eps - r_perp.norm_squared();
                if !(rho2 > 0.0) {
                    return;
                }
                let rho = rho2.sqrt();
                for signs in 0u32..(1 << s) {
                    let sigma = DVector::from_iterator(s, (0..s).map(|i| if signs & (1 << i) != 0 { 1.0 } else { -1.0 }));
                    let gz = z.tr_mul(&sigma);
                    let hg = chol.solve(&gz);
                    let kappa = gz.dot(&hg).max(0.0).sqrt();
                    if kappa <= 1e-14 {
                        continue;
                    }
                    let t = &t0 - hg * (rho / kappa);
                    let a = &a_p + &z * t;
                    if a.iter().zip(sigma.iter()).any(|(ai, si)| ai * si < 0.0) {
                        continue;
                    }
                    push(embed(n, &support, &a), &support, tight, Some(kappa / rho), &mut cands);
                }
            });
        }
    }

    let best = cands
        .iter()
        .map(|c| c.objective)
        .fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(Error::Infeasible("no feasible candidate among enumerated faces".into()));
    }
    let shape = (q.inputs(), q.outputs());
    let mut chosen: Option<(f64, OracleSolution)> = None;
    for cand in cands.iter().filter(|c| c.objective <= best + 1e-10 * best.max(1.0)) {
        let mult = face_multipliers(&d, cand);
        let u = DMatrix::from_column_slice(shape.0, shape.1, cand.u.as_slice());
        let res = kkt_residuals(q, &u, &mult).optimality();
        if chosen.as_ref().is_none_or(|(r, _)| res < *r) {
            chosen = Some((
                res,
                OracleSolution {
                    u,
                    objective: cand.objective,
                    multipliers: mult,
                },
            ));
        }
    }
    Ok(chosen.expect("at least one optimal candidate").1)
}

fn face_multipliers(d: &Dense, cand: &Candidate) -> Multipliers {
    let n_omega = d.g.nrows();
    let mut ineq = vec![0.0; d.b.nrows()];
    let support: Vec<usize> = cand.support.iter().copied().filter(|&i| cand.u[i] != 0.0).collect();
    let sigma = DVector::from_iterator(support.len(), support.iter().map(|&i| cand.u[i].signum()));
    let g_s = d.g.select_columns(&support);
    let b_js = sub(&d.b, &cand.tight, &support);
    let k = cand.tight.len();
    match cand.lambda {
        None => {
            let mut m = DMatrix::zeros(support.len(), n_omega + k);
            m.view_mut((0, 0), (support.len(), n_omega)).copy_from(&g_s.transpose());
            m.view_mut((0, n_omega), (support.len(), k)).copy_from(&b_js.transpose());
            let free: Vec<bool> = (0..n_omega + k).map(|j| j < n_omega).collect();
            let theta = nnls(&m, &(-&sigma), &free);
            for (off, &r) in cand.tight.iter().enumerate() {
                ineq[r] = theta[n_omega + off];
            }
            Multipliers {
                fit: FitMultiplier::Equality(theta.rows(0, n_omega).iter().copied().collect()),
                ineq,
            }
        }
        Some(lambda) => {
            let r = &d.g * &cand.u - &d.y;
            let rhs = -(&sigma + g_s.tr_mul(&r) * lambda);
            let theta = nnls(&b_js.transpose(), &rhs, &vec![false; k]);
            for (off, &row) in cand.tight.iter().enumerate() {
                ineq[row] = theta[off];
            }
            Multipliers {
                fit: FitMultiplier::Ball(lambda),
                ineq,
            }
        }
    }
}
