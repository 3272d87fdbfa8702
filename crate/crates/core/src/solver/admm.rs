//! Three-block splitting iteration on a scaled program.
//!
//! Variables: `u` (free), `x = u` carrying the `l1` prox, and `w = U^T X`
//! projected onto the ball-times-halfspaces set. With both consensus blocks
//! sharing one penalty the `u`-update matrix `I + X X^T` does not depend on
//! the penalty and is factored once. The nonnegative backend runs the same
//! scheme on `[u+; u-] >= 0`.

use std::collections::hash_map::DefaultHasher;
use std::collections::{HashSet, VecDeque};
use std::hash::{Hash, Hasher};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::kkt::{FitMultiplier, Multipliers};
use super::linalg::{inf_norm, spectral_norm};
use super::polish::{self, ActiveSet, Anchor, Blocks, Face, Tolerances};
use super::prox::{project_ball, shifted_nonneg, soft_threshold};
use super::{Backend, SolveStatus, SolverOptions};
use crate::constraints::QcqpData;

pub(crate) struct Outcome {
    pub u: DMatrix<f64>,
    pub mult: Multipliers,
    pub iterations: usize,
    pub status: SolveStatus,
    pub polished: bool,
    pub rho: f64,
}

struct Projector {
    omega_pos: Vec<usize>,
    omega_c_pos: Vec<usize>,
    y: Vec<f64>,
    c: Vec<f64>,
    eps: f64,
    buf: Vec<f64>,
}

impl Projector {
    fn new(q: &QcqpData) -> Self {
        let pat = q.pattern();
        let rows = q.outputs();
        let pos = |i: usize| {
            let (m, p) = pat.split(i);
            p * rows + m
        };
        Self {
            omega_pos: pat.omega().iter().map(|&i| pos(i)).collect(),
            omega_c_pos: pat.omega_c().iter().map(|&i| pos(i)).collect(),
            y: q.y_omega(),
            c: q.c(),
            eps: q.epsilon(),
            buf: vec![0.0; pat.omega().len()],
        }
    }

    /// Projects in place; returns whether the ball part moved the point.
    fn project(&mut self, w: &mut DMatrix<f64>) -> bool {
        let ws = w.as_mut_slice();
        for (k, &i) in self.omega_pos.iter().enumerate() {
            self.buf[k] = ws[i];
        }
        let moved = project_ball(&mut self.buf, &self.y, self.eps);
        for (k, &i) in self.omega_pos.iter().enumerate() {
            ws[i] = self.buf[k];
        }
        for (k, &i) in self.omega_c_pos.iter().enumerate() {
            ws[i] = ws[i].min(self.c[k]);
        }
        moved
    }

    fn gather_omega(&self, grid: &DMatrix<f64>) -> Vec<f64> {
        self.omega_pos.iter().map(|&i| grid.as_slice()[i]).collect()
    }

    fn gather_omega_c(&self, grid: &DMatrix<f64>) -> Vec<f64> {
        self.omega_c_pos.iter().map(|&i| grid.as_slice()[i]).collect()
    }

    /// Fit excess and inequality violation of a prediction grid.
    fn violation(&self, pred: &DMatrix<f64>) -> (f64, f64) {
        let ps = pred.as_slice();
        let r2: f64 = self
            .omega_pos
            .iter()
            .zip(&self.y)
            .map(|(&i, y)| (ps[i] - y).powi(2))
            .sum();
        let fit = (r2.sqrt() - self.eps).max(0.0);
        let ineq = self
            .omega_c_pos
            .iter()
            .zip(&self.c)
            .fold(0.0f64, |m, (&i, c)| m.max(ps[i] - c));
        (fit, ineq)
    }

    /// Support function of the constraint set at `d`, with `d` clamped to be
    /// nonnegative off the active pattern.
    fn support(&self, d: &mut DMatrix<f64>) -> f64 {
        let ds = d.as_mut_slice();
        let mut support = 0.0;
        let mut norm2 = 0.0;
        for (&i, y) in self.omega_pos.iter().zip(&self.y) {
            support += ds[i] * y;
            norm2 += ds[i] * ds[i];
        }
        support += self.eps * norm2.sqrt();
        for (&i, c) in self.omega_c_pos.iter().zip(&self.c) {
            ds[i] = ds[i].max(0.0);
            support += ds[i] * c;
        }
        support
    }

    /// Lower bound on the optimal `l1` norm from a dual grid `d`: after
    /// rescaling so that `||X d^T||_inf <= 1`, `-support(d)` is dual feasible.
    fn dual_bound(&self, d: &DMatrix<f64>, x: &DMatrix<f64>) -> f64 {
        let mut d = d.clone();
        let support = self.support(&mut d);
        let g = inf_norm((x * d.transpose()).as_slice());
        -support / g.max(1.0)
    }

    /// Certificate that no point satisfies both constraint families with
    /// `w = U^T X`: `X d^T = 0`, `d` nonnegative off the active pattern and
    /// negative support function on the set.
    fn infeasibility_certificate(&self, d: &DMatrix<f64>, x: &DMatrix<f64>, tol: f64) -> bool {
        let scale = inf_norm(d.as_slice());
        if scale <= 1e-10 {
            return false;
        }
        let d = d / scale;
        if inf_norm((x * d.transpose()).as_slice()) > tol {
            return false;
        }
        let ds = d.as_slice();
        let mut support = 0.0;
        let mut norm2 = 0.0;
        for (&i, y) in self.omega_pos.iter().zip(&self.y) {
            support += ds[i] * y;
            norm2 += ds[i] * ds[i];
        }
        support += self.eps * norm2.sqrt();
        for (&i, c) in self.omega_c_pos.iter().zip(&self.c) {
            if ds[i] < -tol {
                return false;
            }
            support += ds[i].max(0.0) * c;
        }
        support < -tol
    }
}

/// Cholesky factor of the `u`-update matrix `I + r X X^T` (signed) or
/// `I + 2 r X X^T` (nonnegative split, via sum/difference coordinates),
/// with `r = rho_w / rho_x`.
struct Factor {
    backend: Backend,
    chol: Cholesky<f64, Dyn>,
}

impl Factor {
    fn new(backend: Backend, gram: &DMatrix<f64>, r: f64) -> Self {
        let n = gram.nrows();
        let k = match backend {
            Backend::Signed => r,
            Backend::Nonneg => 2.0 * r,
        };
        let chol = (DMatrix::identity(n, n) + gram * k)
            .cholesky()
            .expect("identity plus a Gram matrix is positive definite");
        Self { backend, chol }
    }

    fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        match self.backend {
            Backend::Signed => self.chol.solve(rhs),
            Backend::Nonneg => {
                let n = rhs.nrows() / 2;
                let r1 = rhs.rows(0, n);
                let r2 = rhs.rows(n, n);
                let s = r1 + r2;
                let d = self.chol.solve(&(r1 - r2));
                let mut out = DMatrix::zeros(2 * n, rhs.ncols());
                out.rows_mut(0, n).copy_from(&((&s + &d) * 0.5));
                out.rows_mut(n, n).copy_from(&((&s - &d) * 0.5));
                out
            }
        }
    }
}

fn collapse(backend: Backend, v: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    match backend {
        Backend::Signed => v.clone(),
        Backend::Nonneg => v.rows(0, n) - v.rows(n, n),
    }
}

fn expand(backend: Backend, g: DMatrix<f64>) -> DMatrix<f64> {
    match backend {
        Backend::Signed => g,
        Backend::Nonneg => {
            let n = g.nrows();
            let mut out = DMatrix::zeros(2 * n, g.ncols());
            out.rows_mut(0, n).copy_from(&g);
            out.rows_mut(n, n).copy_from(&(-g));
            out
        }
    }
}

fn signature(set: &ActiveSet) -> u64 {
    let mut h = DefaultHasher::new();
    set.hash(&mut h);
    h.finish()
}

fn active_set(xc: &DMatrix<f64>, tight: Vec<Vec<usize>>) -> ActiveSet {
    let support = (0..xc.ncols())
        .map(|m| {
            (0..xc.nrows())
                .filter(|&i| xc[(i, m)] != 0.0)
                .map(|i| (i, xc[(i, m)] > 0.0))
                .collect()
        })
        .collect();
    ActiveSet { support, tight }
}

/// Groups tight inequality positions (indices into `Omega^c`) by neuron, as local indices.
fn tight_by_neuron(q: &QcqpData, is_tight: impl Fn(usize) -> bool) -> Vec<Vec<usize>> {
    let pat = q.pattern();
    let mut out = vec![Vec::new(); q.outputs()];
    let mut local = vec![0usize; q.outputs()];
    for (k, &i) in pat.omega_c().iter().enumerate() {
        let m = pat.split(i).0;
        if is_tight(k) {
            out[m].push(local[m]);
        }
        local[m] += 1;
    }
    out
}

fn admm_multipliers(q: &QcqpData, proj: &Projector, xc: &DMatrix<f64>, dual: &DMatrix<f64>) -> Multipliers {
    let fit_dual = proj.gather_omega(dual);
    let ineq: Vec<f64> = proj.gather_omega_c(dual).into_iter().map(|v| v.max(0.0)).collect();
    let fit = if q.epsilon() > 0.0 {
        let pred = q.predictions(xc);
        let r: Vec<f64> = proj
            .gather_omega(&pred)
            .iter()
            .zip(&proj.y)
            .map(|(a, b)| a - b)
            .collect();
        let rr: f64 = r.iter().map(|v| v * v).sum();
        let lambda = if rr > 0.0 {
            (fit_dual.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / rr).max(0.0)
        } else {
            0.0
        };
        FitMultiplier::Ball(lambda)
    } else {
        FitMultiplier::Equality(fit_dual)
    };
    Multipliers { fit, ineq }
}

/// Row scaling `d` with `D X` having unit-norm rows, normalized so that
/// `||D X||_2 = 1`. Zero rows keep weight one.
fn equilibrate(x: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let mut d: Vec<f64> = x
        .row_iter()
        .map(|r| {
            let nrm = r.norm();
            if nrm > 0.0 { 1.0 / nrm } else { 1.0 }
        })
        .collect();
    let mut xs = x.clone();
    for (i, di) in d.iter().enumerate() {
        xs.row_mut(i).scale_mut(*di);
    }
    let s = spectral_norm(&xs);
    if s > 0.0 {
        xs /= s;
        d.iter_mut().for_each(|v| *v /= s);
    }
    (xs, d)
}

/// Maps a scaled iterate `u~` back to `u = D u~`.
fn unscale(mut u: DMatrix<f64>, d: &[f64]) -> DMatrix<f64> {
    for (i, di) in d.iter().enumerate() {
        u.row_mut(i).scale_mut(*di);
    }
    u
}

fn flatten(parts: &[&DMatrix<f64>]) -> Vec<f64> {
    parts.iter().flat_map(|m| m.as_slice().iter().copied()).collect()
}

fn unflatten(z: &[f64], parts: &mut [&mut DMatrix<f64>]) {
    let mut off = 0;
    for m in parts.iter_mut() {
        let len = m.len();
        m.as_mut_slice().copy_from_slice(&z[off..off + len]);
        off += len;
    }
}

/// Type-II Anderson acceleration of the fixed-point map `z -> T(z)` with a
/// residual safeguard: an extrapolated point whose next residual grows is
/// discarded in favor of the plain iterate.
struct Anderson {
    memory: usize,
    dz: VecDeque<Vec<f64>>,
    dg: VecDeque<Vec<f64>>,
    prev: Option<(Vec<f64>, Vec<f64>)>,
    /// Plain image of the last extrapolated step, with its residual norm.
    fallback: Option<(Vec<f64>, f64)>,
}

impl Anderson {
    fn new(memory: usize) -> Self {
        Self {
            memory,
            dz: VecDeque::new(),
            dg: VecDeque::new(),
            prev: None,
            fallback: None,
        }
    }

    fn reset(&mut self) {
        self.dz.clear();
        self.dg.clear();
        self.prev = None;
        self.fallback = None;
    }

    /// `z` is the input of the plain step just taken and `state` its image.
    fn step(&mut self, z: Vec<f64>, state: &mut [&mut DMatrix<f64>]) {
        let fz = flatten(&state.iter().map(|m| &**m).collect::<Vec<_>>());
        let g: Vec<f64> = fz.iter().zip(&z).map(|(f, v)| f - v).collect();
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if let Some((plain, plain_norm)) = self.fallback.take() {
            if gnorm > plain_norm {
                // the extrapolation hurt: restart from the plain image
                unflatten(&plain, state);
                self.reset();
                return;
            }
        }
        if let Some((z_prev, g_prev)) = self.prev.take() {
            self.dz.push_back(z.iter().zip(&z_prev).map(|(a, b)| a - b).collect());
            self.dg.push_back(g.iter().zip(&g_prev).map(|(a, b)| a - b).collect());
            if self.dz.len() > self.memory {
                self.dz.pop_front();
                self.dg.pop_front();
            }
        }
        let k = self.dg.len();
        if k > 0 {
            let mut gram = DMatrix::zeros(k, k);
            let mut rhs = DVector::zeros(k);
            for i in 0..k {
                for j in 0..=i {
                    let v: f64 = self.dg[i].iter().zip(&self.dg[j]).map(|(a, b)| a * b).sum();
                    gram[(i, j)] = v;
                    gram[(j, i)] = v;
                }
                rhs[i] = self.dg[i].iter().zip(&g).map(|(a, b)| a * b).sum();
            }
            let reg = 1e-10 * gram.trace().max(1e-300);
            for i in 0..k {
                gram[(i, i)] += reg;
            }
            if let Some(gamma) = gram.cholesky().map(|c| c.solve(&rhs)) {
                if gamma.iter().all(|v| v.is_finite()) {
                    let mut next = fz.clone();
                    for i in 0..k {
                        let gi = gamma[i];
                        for ((nv, dz), dg) in next.iter_mut().zip(&self.dz[i]).zip(&self.dg[i]) {
                            *nv -= gi * (dz + dg);
                        }
                    }
                    unflatten(&next, state);
                    self.fallback = Some((fz, gnorm));
                }
            }
        }
        self.prev = Some((z, g));
    }
}

/// Distinct active sets polished before giving up on polishing when `eps > 0`;
/// each attempt costs a factorization per neuron, and a run that keeps failing
/// is better served by the interior-point fallback. At `eps = 0` there is no
/// fallback, so polishing is never capped.
const MAX_POLISH_CANDIDATES: usize = 8;

pub(crate) fn run(q: &QcqpData, opts: &SolverOptions, feas_tol: f64) -> Outcome {
    let n = q.inputs();
    let m_out = q.outputs();
    let (xs, dscale) = equilibrate(q.x());
    let xs = &xs;
    let backend = opts.backend;
    let blocks_dim = match backend {
        Backend::Signed => n,
        Backend::Nonneg => 2 * n,
    };
    let gram = xs * xs.transpose();
    let mut proj = Projector::new(q);
    let blocks = opts.polish.then(|| Blocks::new(q));
    let tol = Tolerances {
        feasibility: feas_tol,
        optimality: opts.polish_tol,
    };

    let alpha = opts.relaxation;
    // separate penalties for the `x = u` and `w = U^T X` consensus blocks
    let mut rho_x = opts.rho;
    let mut rho_w = opts.rho;
    let mut factor = Factor::new(backend, &gram, rho_w / rho_x);
    let mut x = DMatrix::zeros(blocks_dim, m_out);
    let mut a = DMatrix::zeros(blocks_dim, m_out);
    let mut w = DMatrix::zeros(m_out, q.samples());
    let mut b = DMatrix::zeros(m_out, q.samples());

    let mut last_sig: Option<u64> = None;
    let mut tried: HashSet<u64> = HashSet::new();
    let polish_cap = if q.epsilon() > 0.0 { MAX_POLISH_CANDIDATES } else { usize::MAX };
    let mut best: Option<(f64, DMatrix<f64>, DMatrix<f64>)> = None;
    let mut rho_changed_at = usize::MAX;

    let mut status = SolveStatus::MaxIterations;
    let mut iterations = 0;
    let mut accel = (opts.anderson_memory > 0).then(|| Anderson::new(opts.anderson_memory));

    for it in 1..=opts.max_iters {
        iterations = it;
        let check = it % opts.check_interval == 0 || it == opts.max_iters;
        let z_in = accel.as_ref().map(|_| flatten(&[&x, &w, &a, &b]));

        // u-update
        let ratio = rho_w / rho_x;
        let coupling = expand(backend, xs * (&w - &b).transpose()) * ratio;
        let u = factor.solve(&(&x - &a + coupling));
        let au = collapse(backend, &u, n).tr_mul(xs);

        let xh = &u * alpha + &x * (1.0 - alpha);
        let wh = &au * alpha + &w * (1.0 - alpha);

        let x_old = check.then(|| x.clone());
        let w_old = check.then(|| w.clone());
        let b_old = check.then(|| b.clone());

        let t = 1.0 / rho_x;
        x = &xh + &a;
        for j in 0..m_out {
            for (i, v) in x.column_mut(j).iter_mut().enumerate() {
                let ti = t * dscale[i % n];
                *v = match backend {
                    Backend::Signed => soft_threshold(*v, ti),
                    Backend::Nonneg => shifted_nonneg(*v, ti),
                };
            }
        }
        w = &wh + &b;
        let ball_moved = proj.project(&mut w);

        a += &xh - &x;
        b += &wh - &w;

        if !check {
            if let (Some(acc), Some(z_in)) = (accel.as_mut(), z_in) {
                acc.step(z_in, &mut [&mut x, &mut w, &mut a, &mut b]);
            }
            continue;
        }
        let x_old = x_old.expect("saved on check iterations");
        let w_old = w_old.expect("saved on check iterations");
        let b_old = b_old.expect("saved on check iterations");

        let pred = collapse(backend, &x, n).tr_mul(xs);
        let xc = unscale(collapse(backend, &x, n), &dscale);
        let (fit_v, ineq_v) = proj.violation(&pred);
        let viol = fit_v.max(ineq_v);
        let dual = &b * rho_w;
        if best.as_ref().is_none_or(|(v, _, _)| viol < *v) {
            best = Some((viol, xc.clone(), dual.clone()));
        }

        // polish on a stable active set
        if let Some(blocks) = &blocks {
            let strict = tight_by_neuron(q, |k| b.as_slice()[proj.omega_c_pos[k]] > 1e-14);
            let set = active_set(&xc, strict);
            let sig = signature(&set);
            if last_sig == Some(sig) && !tried.contains(&sig) && tried.len() < polish_cap {
                tried.insert(sig);
                let fit_anchor = proj.gather_omega(&dual);
                let ineq_anchor = proj.gather_omega_c(&dual);
                let anchor = Anchor {
                    fit: &fit_anchor,
                    ineq: &ineq_anchor,
                };
                let slack: Vec<f64> = proj
                    .omega_c_pos
                    .iter()
                    .zip(&proj.c)
                    .map(|(&i, c)| c - au.as_slice()[i])
                    .collect();
                let near = tight_by_neuron(q, |k| {
                    b.as_slice()[proj.omega_c_pos[k]] > 1e-14 || slack[k] <= 1e-9
                });
                let mut sets = vec![set];
                if near != sets[0].tight {
                    sets.push(active_set(&xc, near));
                }
                let faces: &[Face] = if q.epsilon() == 0.0 {
                    &[Face::Equality]
                } else if ball_moved {
                    &[Face::Ball, Face::Vertex]
                } else {
                    &[Face::Vertex, Face::Ball]
                };
                for face in faces {
                    for s in &sets {
                        for an in [None, Some(&anchor)] {
                            let mut cur = s.clone();
                            for _ in 0..=polish::REFINE_ROUNDS {
                                match polish::attempt(q, blocks, &cur, *face, an, &tol) {
                                    Ok((pu, mult)) => {
                                        return Outcome {
                                            u: pu,
                                            mult,
                                            iterations: it,
                                            status: SolveStatus::Converged,
                                            polished: true,
                                            rho: rho_w,
                                        };
                                    }
                                    Err((pu, mult)) => match polish::refine(q, blocks, &cur, &pu, &mult, &tol) {
                                        Some(next) => cur = next,
                                        None => break,
                                    },
                                }
                            }
                        }
                    }
                }
            }
            last_sig = Some(sig);
        }

        // residuals, per block and combined
        let pri_x = inf_norm((&u - &x).as_slice());
        let pri_w = inf_norm((&au - &w).as_slice());
        let dx = (&x - &x_old) * rho_x;
        let dw = expand(backend, xs * (&w - &w_old).transpose()) * rho_w;
        let dual_x = inf_norm(dx.as_slice());
        let dual_w = inf_norm(dw.as_slice());
        let r_pri = pri_x.max(pri_w);
        let r_dual = inf_norm((dx + dw).as_slice());
        let pri_scale = inf_norm(u.as_slice())
            .max(inf_norm(x.as_slice()))
            .max(inf_norm(au.as_slice()))
            .max(inf_norm(w.as_slice()));
        let dual_scale = (rho_x * inf_norm(a.as_slice()))
            .max(inf_norm(expand(backend, xs * dual.transpose()).as_slice()));
        let eps_pri = opts.abs_tol + opts.rel_tol * pri_scale;
        let eps_dual = opts.abs_tol + opts.rel_tol * dual_scale;

        if viol <= feas_tol {
            let residual_ok = r_pri <= eps_pri && r_dual <= eps_dual;
            let obj = xc.iter().map(|v| v.abs()).sum::<f64>();
            let gap_ok = || obj - proj.dual_bound(&dual, q.x()) <= opts.rel_tol * obj + opts.abs_tol;
            if residual_ok || gap_ok() {
                status = SolveStatus::Converged;
                break;
            }
        }

        if rho_changed_at != it - 1 {
            let delta = (&b - &b_old) * rho_w;
            if proj.infeasibility_certificate(&delta, xs, opts.infeasibility_tol) {
                status = SolveStatus::Infeasible;
                break;
            }
        }

        if opts.adaptive_rho {
            let balance = |rho: f64, pri: f64, dual: f64| {
                if pri > 10.0 * dual {
                    (rho * 2.0).min(opts.rho_max)
                } else if dual > 10.0 * pri {
                    (rho / 2.0).max(opts.rho_min)
                } else {
                    rho
                }
            };
            let (new_x, new_w) = (balance(rho_x, pri_x, dual_x), balance(rho_w, pri_w, dual_w));
            if new_x != rho_x || new_w != rho_w {
                a *= rho_x / new_x;
                b *= rho_w / new_w;
                rho_x = new_x;
                rho_w = new_w;
                factor = Factor::new(backend, &gram, rho_w / rho_x);
                rho_changed_at = it;
                if let Some(acc) = accel.as_mut() {
                    acc.reset();
                }
                continue;
            }
        }
        if let (Some(acc), Some(z_in)) = (accel.as_mut(), z_in) {
            acc.step(z_in, &mut [&mut x, &mut w, &mut a, &mut b]);
        }
    }

    let xc = unscale(collapse(backend, &x, n), &dscale);
    let (u_out, dual) = if status == SolveStatus::Converged {
        (xc, &b * rho_w)
    } else {
        match best {
            Some((_, bx, bd)) => (bx, bd),
            None => (xc, &b * rho_w),
        }
    };
    let mult = admm_multipliers(q, &proj, &u_out, &dual);
    Outcome {
        u: u_out,
        mult,
        iterations,
        status,
        polished: false,
        rho: rho_w,
    }
}
