//! Optimality residuals for `min ||u||_1` over a [`QcqpData`] set.
//!
//! The Lagrangian is `||u||_1 + (lambda/2)(||r||^2 - eps^2) + nu^T (P u - c)` with
//! `r = A_Omega^T u - y_Omega`; at `eps = 0` the fit term becomes `zeta^T r`.
//! Multiplier-weighted quantities are reported in a unit-free form: `lambda`
//! and `nu` are multiplied by `||X||_2` (and `lambda` additionally by the
//! target scale), and slacks are divided by the target scale.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::linalg::spectral_norm;
use super::nnls::nnls;
use crate::constraints::QcqpData;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FitMultiplier {
    /// Multiplier of the ball constraint (`eps > 0`).
    Ball(f64),
    /// One free multiplier per active entry (`eps = 0`).
    Equality(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    pub fit: FitMultiplier,
    /// One nonnegative multiplier per inactive entry.
    pub ineq: Vec<f64>,
}

impl Multipliers {
    pub fn zero(q: &QcqpData) -> Self {
        let fit = if q.epsilon() > 0.0 {
            FitMultiplier::Ball(0.0)
        } else {
            FitMultiplier::Equality(vec![0.0; q.pattern().omega().len()])
        };
        Self {
            fit,
            ineq: vec![0.0; q.pattern().omega_c().len()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KktResiduals {
    /// `max(0, ||r|| - eps)`, in target units.
    pub primal_fit: f64,
    /// `max_j (P u - c)_j`, clamped at zero, in target units.
    pub primal_ineq: f64,
    /// `max_i dist(-g_i, d|u_i|)` for the multiplier gradient `g`.
    pub stationarity: f64,
    pub dual_feasibility: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.primal_fit
            .max(self.primal_ineq)
            .max(self.stationarity)
            .max(self.dual_feasibility)
            .max(self.complementarity)
    }

    pub fn optimality(&self) -> f64 {
        self.stationarity
            .max(self.dual_feasibility)
            .max(self.complementarity)
    }
}

/// Target scale used to make slacks unit-free.
pub(crate) fn target_scale(q: &QcqpData) -> f64 {
    let y = q.y_omega();
    let ymax = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cmax = q.c().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let s = ymax.max(cmax).max(q.epsilon());
    if s > 0.0 { s } else { 1.0 }
}

pub(crate) fn data_scale(q: &QcqpData) -> f64 {
    let s = spectral_norm(q.x());
    if s > 0.0 { s } else { 1.0 }
}

pub fn kkt_residuals(q: &QcqpData, u: &DMatrix<f64>, mult: &Multipliers) -> KktResiduals {
    kkt_with_scales(q, u, mult, data_scale(q), target_scale(q))
}

pub(crate) fn kkt_with_scales(
    q: &QcqpData,
    u: &DMatrix<f64>,
    mult: &Multipliers,
    sx: f64,
    sy: f64,
) -> KktResiduals {
    let uv = u.as_slice();
    let y = q.y_omega();
    let c = q.c();
    let fit = q.fit_apply(uv);
    let r: Vec<f64> = fit.iter().zip(&y).map(|(a, b)| a - b).collect();
    let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let eps = q.epsilon();
    let w = q.ineq_apply(uv);

    let primal_fit = (rnorm - eps).max(0.0);
    let primal_ineq = w.iter().zip(&c).fold(0.0f64, |m, (a, b)| m.max(a - b));

    let mut g = q.ineq_adjoint(&mult.ineq);
    let mut dual_feasibility = mult.ineq.iter().fold(0.0f64, |m, v| m.max(-v * sx));
    let mut complementarity = mult
        .ineq
        .iter()
        .zip(w.iter().zip(&c))
        .fold(0.0f64, |m, (nu, (wi, ci))| m.max((nu * sx * (ci - wi) / sy).abs()));
    match &mult.fit {
        FitMultiplier::Ball(lambda) => {
            let gf = q.fit_adjoint(&r);
            for (gi, fi) in g.iter_mut().zip(&gf) {
                *gi += lambda * fi;
            }
            dual_feasibility = dual_feasibility.max(-lambda * sx * sy);
            let slack = (rnorm * rnorm - eps * eps) / (sy * sy);
            complementarity = complementarity.max((lambda * sx * sy * slack).abs());
        }
        FitMultiplier::Equality(zeta) => {
            let gf = q.fit_adjoint(zeta);
            for (gi, fi) in g.iter_mut().zip(&gf) {
                *gi += fi;
            }
        }
    }
    let stationarity = uv.iter().zip(&g).fold(0.0f64, |m, (ui, gi)| {
        let d = if *ui > 0.0 {
            (gi + 1.0).abs()
        } else if *ui < 0.0 {
            (gi - 1.0).abs()
        } else {
            (gi.abs() - 1.0).max(0.0)
        };
        m.max(d)
    });

    KktResiduals {
        primal_fit,
        primal_ineq,
        stationarity,
        dual_feasibility,
        complementarity,
    }
}

/// Best-effort multipliers for a candidate `u`: nonnegative least squares on the
/// stationarity equations over the support, using near-active inequalities.
pub fn estimate_multipliers(q: &QcqpData, u: &DMatrix<f64>) -> Multipliers {
    let uv = u.as_slice();
    let support: Vec<usize> = (0..uv.len()).filter(|&i| uv[i] != 0.0).collect();
    let mut mult = Multipliers::zero(q);
    if support.is_empty() {
        return mult;
    }
    let sy = target_scale(q);
    let c = q.c();
    let w = q.ineq_apply(uv);
    let act_tol = 1e-7 * sy;
    let near: Vec<usize> = (0..c.len()).filter(|&j| c[j] - w[j] <= act_tol).collect();

    let n_omega = q.pattern().omega().len();
    let mut cols: Vec<DVector<f64>> = Vec::new();
    let mut free = Vec::new();
    let eps = q.epsilon();
    let ball_col = if eps > 0.0 {
        let y = q.y_omega();
        let r: Vec<f64> = q.fit_apply(uv).iter().zip(&y).map(|(a, b)| a - b).collect();
        let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rnorm > 0.0 && rnorm >= eps * (1.0 - 1e-6) {
            let gf = q.fit_adjoint(&r);
            cols.push(DVector::from_iterator(support.len(), support.iter().map(|&i| gf[i])));
            free.push(false);
            true
        } else {
            false
        }
    } else {
        let mut e = vec![0.0; n_omega];
        for k in 0..n_omega {
            e[k] = 1.0;
            let gf = q.fit_adjoint(&e);
            e[k] = 0.0;
            cols.push(DVector::from_iterator(support.len(), support.iter().map(|&i| gf[i])));
            free.push(true);
        }
        false
    };
    let mut e = vec![0.0; c.len()];
    for &j in &near {
        e[j] = 1.0;
        let gb = q.ineq_adjoint(&e);
        e[j] = 0.0;
        cols.push(DVector::from_iterator(support.len(), support.iter().map(|&i| gb[i])));
        free.push(false);
    }
    if cols.is_empty() {
        return mult;
    }
    let a = DMatrix::from_columns(&cols);
    let rhs = DVector::from_iterator(support.len(), support.iter().map(|&i| -uv[i].signum()));
    let theta = nnls(&a, &rhs, &free);

    let mut k = 0;
    if eps > 0.0 {
        if ball_col {
            mult.fit = FitMultiplier::Ball(theta[0]);
            k = 1;
        }
    } else {
        mult.fit = FitMultiplier::Equality(theta.rows(0, n_omega).iter().copied().collect());
        k = n_omega;
    }
    for (off, &j) in near.iter().enumerate() {
        mult.ineq[j] = theta[k + off];
    }
    mult
}
