//! `l1` minimization over the relaxed ReLU constraint set.

mod admm;
mod ipm;
mod kkt;
pub(crate) mod linalg;
mod nnls;
mod oracle;
mod polish;
pub mod prox;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use kkt::{estimate_multipliers, kkt_residuals, FitMultiplier, KktResiduals, Multipliers};
pub use nnls::nnls;
pub use oracle::{oracle_solve_tiny, OracleSolution, ORACLE_MAX_SAMPLES, ORACLE_MAX_VARS};

use crate::constraints::{NeuronSubproblem, QcqpData};
use crate::error::{Error, Result};
use crate::model::WeightMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    /// Signed variables with a soft-threshold prox.
    #[default]
    Signed,
    /// `[u+; u-] >= 0` with a linear objective.
    Nonneg,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iters: usize,
    pub rho: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub adaptive_rho: bool,
    /// Over-relaxation factor in `(0, 2)`.
    pub relaxation: f64,
    /// Residuals are evaluated every this many iterations.
    pub check_interval: usize,
    /// Anderson acceleration memory on the splitting fixed point; 0 disables.
    pub anderson_memory: usize,
    /// Try active-set refinement when the support settles.
    pub polish: bool,
    /// Optimality residual a refined point must reach to be accepted.
    pub polish_tol: f64,
    pub infeasibility_tol: f64,
    /// Slack allowed when checking solver output against analytic bounds.
    pub feasibility_slack: f64,
    pub backend: Backend,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            abs_tol: 1e-8,
            rel_tol: 1e-6,
            max_iters: 4_000,
            rho: 1.0,
            rho_min: 1e-4,
            rho_max: 1e4,
            adaptive_rho: true,
            relaxation: 1.6,
            check_interval: 10,
            anderson_memory: 5,
            polish: true,
            polish_tol: 1e-7,
            infeasibility_tol: 1e-7,
            feasibility_slack: 1e-6,
            backend: Backend::Signed,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("abs_tol", self.abs_tol),
            ("rel_tol", self.rel_tol),
            ("rho", self.rho),
            ("rho_min", self.rho_min),
            ("rho_max", self.rho_max),
            ("polish_tol", self.polish_tol),
            ("infeasibility_tol", self.infeasibility_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.feasibility_slack >= 0.0) {
            return Err(Error::InvalidArgument("feasibility_slack must be nonnegative".into()));
        }
        if self.max_iters == 0 || self.check_interval == 0 {
            return Err(Error::InvalidArgument("max_iters and check_interval must be at least 1".into()));
        }
        if self.rho_min > self.rho_max || self.rho < self.rho_min || self.rho > self.rho_max {
            return Err(Error::InvalidArgument("rho outside [rho_min, rho_max]".into()));
        }
        if !(self.relaxation > 0.0 && self.relaxation < 2.0) {
            return Err(Error::InvalidArgument("relaxation must lie in (0, 2)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    /// `||U||_1` of the returned point.
    pub objective: f64,
    /// `max(0, ||A_Omega^T u - y_Omega|| - eps)`.
    pub fit_residual: f64,
    pub ineq_violation: f64,
    pub stationarity: f64,
    pub complementarity: f64,
    pub iterations: usize,
    pub converged: bool,
    pub status: SolveStatus,
    pub polished: bool,
    /// Splitting stalled and the interior-point fallback produced the point.
    #[serde(default)]
    pub interior_point: bool,
    pub rho: f64,
}

impl SolverReport {
    fn trivial(objective: f64) -> Self {
        Self {
            objective,
            fit_residual: 0.0,
            ineq_violation: 0.0,
            stationarity: 0.0,
            complementarity: 0.0,
            iterations: 0,
            converged: true,
            status: SolveStatus::Converged,
            polished: false,
            interior_point: false,
            rho: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    /// `N x M` weights.
    pub u: DMatrix<f64>,
    pub multipliers: Multipliers,
    pub kkt: KktResiduals,
    pub report: SolverReport,
}

fn unscale_multipliers(m: Multipliers, sx: f64, sy: f64) -> Multipliers {
    let fit = match m.fit {
        FitMultiplier::Ball(l) => FitMultiplier::Ball(l / (sx * sy)),
        FitMultiplier::Equality(z) => FitMultiplier::Equality(z.into_iter().map(|v| v / sx).collect()),
    };
    Multipliers {
        fit,
        ineq: m.ineq.into_iter().map(|v| v / sx).collect(),
    }
}

/// Minimizes `||U||_1` over the program, returning weights, multipliers and diagnostics.
pub fn solve_qcqp(q: &QcqpData, opts: &SolverOptions) -> Result<Solution> {
    opts.validate()?;
    let sx = kkt::data_scale(q);
    let sy = kkt::target_scale(q);
    let scaled = q.rescaled(sx, sy);
    let mut out = admm::run(&scaled, opts, opts.abs_tol / sy);
    let mut interior_point = false;
    if out.status == SolveStatus::MaxIterations {
        if let Some(rescue) = interior_fallback(&scaled, opts, opts.abs_tol / sy) {
            out = admm::Outcome {
                iterations: out.iterations,
                rho: out.rho,
                ..rescue
            };
            interior_point = true;
        }
    }
    let u = out.u * (sy / sx);
    let multipliers = unscale_multipliers(out.mult, sx, sy);
    let kkt = kkt::kkt_with_scales(q, &u, &multipliers, sx, sy);
    let converged = out.status == SolveStatus::Converged
        && kkt.primal_fit <= opts.abs_tol
        && kkt.primal_ineq <= opts.abs_tol;
    let report = SolverReport {
        objective: u.iter().map(|v| v.abs()).sum(),
        fit_residual: kkt.primal_fit,
        ineq_violation: kkt.primal_ineq,
        stationarity: kkt.stationarity,
        complementarity: kkt.complementarity,
        iterations: out.iterations,
        converged,
        status: out.status,
        polished: out.polished,
        interior_point,
        rho: out.rho,
    };
    Ok(Solution {
        u,
        multipliers,
        kkt,
        report,
    })
}

/// Interior-point solve of a scaled program, snapped to exact zeros and then
/// polished on the face it identifies. `None` if it fails or the point does
/// not pass the KKT check.
fn interior_fallback(q: &QcqpData, opts: &SolverOptions, feas_tol: f64) -> Option<admm::Outcome> {
    let pt = ipm::solve(q)?;
    let top = pt.u.amax().max(1.0);
    let tol = polish::Tolerances {
        feasibility: feas_tol,
        optimality: opts.polish_tol,
    };
    let done = |u: DMatrix<f64>, mult: Multipliers, polished: bool| admm::Outcome {
        u,
        mult,
        iterations: 0,
        status: SolveStatus::Converged,
        polished,
        rho: 0.0,
    };
    let blocks = opts.polish.then(|| polish::Blocks::new(q));
    let mut tight = vec![Vec::new(); q.outputs()];
    let mut local = vec![0usize; q.outputs()];
    let mut slack = vec![(f64::INFINITY, 0.0); q.pattern().omega_c().len()];
    for &(k, s, z) in &pt.ineq_slack {
        slack[k] = (s, z);
    }
    for (k, &i) in q.pattern().omega_c().iter().enumerate() {
        let m = q.pattern().split(i).0;
        if slack[k].0 < slack[k].1 {
            tight[m].push(local[m]);
        }
        local[m] += 1;
    }
    // the interior point only approaches zero; try progressively coarser snaps
    for snap in IPM_SNAPS {
        let u = pt.u.map(|v| if v.abs() <= snap * top { 0.0 } else { v });
        if let Some(blocks) = &blocks {
            let support = (0..u.ncols())
                .map(|m| (0..u.nrows()).filter(|&i| u[(i, m)] != 0.0).map(|i| (i, u[(i, m)] > 0.0)).collect())
                .collect();
            let set = polish::ActiveSet {
                support,
                tight: tight.clone(),
            };
            for face in [polish::Face::Ball, polish::Face::Vertex] {
                let mut cur = set.clone();
                for _ in 0..=polish::REFINE_ROUNDS {
                    match polish::attempt(q, blocks, &cur, face, None, &tol) {
                        Ok((pu, mult)) => return Some(done(pu, mult, true)),
                        Err((pu, mult)) => match polish::refine(q, blocks, &cur, &pu, &mult, &tol) {
                            Some(next) => cur = next,
                            None => break,
                        },
                    }
                }
            }
        }
        let kkt = kkt::kkt_residuals(q, &u, &pt.mult);
        // the interior point carries its own duality-gap certificate, so only
        // feasibility of the snapped point needs checking
        if kkt.primal_fit <= feas_tol && kkt.primal_ineq <= feas_tol {
            return Some(done(u, pt.mult.clone(), false));
        }
    }
    None
}

/// Relative magnitudes below which interior-point weights are snapped to zero.
const IPM_SNAPS: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

pub fn solve_layer(q: &QcqpData, opts: &SolverOptions) -> Result<(WeightMatrix, SolverReport)> {
    let sol = solve_qcqp(q, opts)?;
    Ok((WeightMatrix::new(sol.u)?, sol.report))
}

pub fn solve_neuron(p: &NeuronSubproblem, opts: &SolverOptions) -> Result<(DVector<f64>, SolverReport)> {
    opts.validate()?;
    if p.omega_row.is_empty() && p.v.iter().all(|v| *v >= 0.0) {
        return Ok((DVector::zeros(p.x.nrows()), SolverReport::trivial(0.0)));
    }
    let sol = solve_qcqp(&p.to_qcqp(), opts)?;
    Ok((sol.u.column(0).into_owned(), sol.report))
}
