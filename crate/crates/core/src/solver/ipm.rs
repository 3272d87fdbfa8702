//! Primal-dual interior-point fallback for programs where splitting stalls.
//!
//! Conic form over `x = (u, t)`:
//!
//! ```text
//! min 1^T t   s.t.   u - t <= 0,  -u - t <= 0,  B_m u_m <= c_m,
//!                    (eps', yhat - R u) in the second-order cone
//! ```
//!
//! where `R_m^T R_m = X_{Omega_m} X_{Omega_m}^T` and `eps'^2 = eps^2 - const`
//! absorbs the part of `y` outside the range of the fit. With Nesterov-Todd
//! scaling the single cone contributes `beta^-2 R^T R` plus a rank-one term to
//! the normal matrix, so each Newton step is one Cholesky per neuron and a
//! Sherman-Morrison correction. Mehrotra predictor-corrector steps.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use super::kkt::{FitMultiplier, Multipliers};
use crate::constraints::QcqpData;

const MAX_ITERS: usize = 100;
const TOL: f64 = 1e-9;
/// Accepted if the iteration later loses accuracy.
const LOOSE_TOL: f64 = 1e-7;
const STEP: f64 = 0.99;

struct Neuron {
    /// Inequality rows `X_{:,p}^T` over inactive samples with nonzero columns.
    b: DMatrix<f64>,
    c: DVector<f64>,
    /// Position of each row in the program's `Omega^c` ordering.
    ids: Vec<usize>,
    r: DMatrix<f64>,
    rtr: DMatrix<f64>,
    yhat: DVector<f64>,
    lin_off: usize,
    soc_off: usize,
}

struct Program {
    n: usize,
    k: usize,
    neurons: Vec<Neuron>,
    lin: usize,
    soc: usize,
    eps_red: f64,
    h_lin: Vec<f64>,
    h_soc: Vec<f64>,
}

/// Solution of the conic program mapped back to the program's variables.
pub(crate) struct IpmPoint {
    pub u: DMatrix<f64>,
    pub mult: Multipliers,
    /// Slack and multiplier of every kept inequality, for active-set guesses.
    pub ineq_slack: Vec<(usize, f64, f64)>,
}

fn build(q: &QcqpData) -> Option<Program> {
    let n = q.inputs();
    let m_out = q.outputs();
    let pat = q.pattern();
    let x = q.x();
    let mut om: Vec<Vec<usize>> = vec![Vec::new(); m_out];
    let mut omc: Vec<Vec<(usize, usize)>> = vec![Vec::new(); m_out];
    for &i in pat.omega() {
        let (m, p) = pat.split(i);
        om[m].push(p);
    }
    for (k, &i) in pat.omega_c().iter().enumerate() {
        let (m, p) = pat.split(i);
        omc[m].push((k, p));
    }
    let c_all = q.c();
    let mut lam_max = 0.0f64;
    let mut eig = Vec::with_capacity(m_out);
    for cols in &om {
        let xo = x.select_columns(cols);
        let e = SymmetricEigen::new(&xo * xo.transpose());
        lam_max = lam_max.max(e.eigenvalues.max());
        eig.push((xo, e));
    }
    let cut = 1e-12 * lam_max.max(1e-300);

    let mut neurons = Vec::with_capacity(m_out);
    let mut lin = 2 * n * m_out;
    let mut soc = 1;
    let mut resid = 0.0;
    for (m, (xo, e)) in eig.into_iter().enumerate() {
        let y = DVector::from_iterator(om[m].len(), om[m].iter().map(|&p| q.targets()[(m, p)]));
        let keep: Vec<usize> = (0..n).filter(|&i| e.eigenvalues[i] > cut).collect();
        let mut r = DMatrix::zeros(keep.len(), n);
        let mut yhat = DVector::zeros(keep.len());
        let gy = &xo * &y;
        for (row, &i) in keep.iter().enumerate() {
            let s = e.eigenvalues[i].sqrt();
            let v = e.eigenvectors.column(i);
            r.set_row(row, &(v.transpose() * s));
            yhat[row] = v.dot(&gy) / s;
        }
        resid += y.norm_squared() - yhat.norm_squared();
        let rtr = r.tr_mul(&r);

        let mut rows = Vec::new();
        let mut c = Vec::new();
        let mut ids = Vec::new();
        for &(k, p) in &omc[m] {
            let col = x.column(p);
            if col.iter().all(|v| *v == 0.0) {
                if c_all[k] < 0.0 {
                    return None;
                }
                continue;
            }
            rows.push(col.transpose());
            c.push(c_all[k]);
            ids.push(k);
        }
        let b = if rows.is_empty() { DMatrix::zeros(0, n) } else { DMatrix::from_rows(&rows) };
        let len = ids.len();
        neurons.push(Neuron {
            b,
            c: DVector::from_vec(c),
            ids,
            soc_off: soc,
            lin_off: lin,
            r,
            rtr,
            yhat,
        });
        lin += len;
        soc += keep.len();
    }
    let eps = q.epsilon();
    let red2 = eps * eps - resid.max(0.0);
    if !(red2 > 1e-12 * eps * eps) || eps == 0.0 {
        return None;
    }
    let eps_red = red2.sqrt();
    let mut h_lin = vec![0.0; lin];
    let mut h_soc = vec![0.0; soc];
    h_soc[0] = eps_red;
    for nr in &neurons {
        h_lin[nr.lin_off..nr.lin_off + nr.c.len()].copy_from_slice(nr.c.as_slice());
        h_soc[nr.soc_off..nr.soc_off + nr.yhat.len()].copy_from_slice(nr.yhat.as_slice());
    }
    Some(Program {
        n,
        k: n * m_out,
        neurons,
        lin,
        soc,
        eps_red,
        h_lin,
        h_soc,
    })
}

impl Program {
    /// `G x` split into linear and cone parts.
    fn g(&self, u: &[f64], t: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let k = self.k;
        let mut gl = vec![0.0; self.lin];
        for i in 0..k {
            gl[i] = u[i] - t[i];
            gl[k + i] = -u[i] - t[i];
        }
        let mut gs = vec![0.0; self.soc];
        for (m, nr) in self.neurons.iter().enumerate() {
            let um = DVector::from_column_slice(&u[m * self.n..(m + 1) * self.n]);
            let bu = &nr.b * &um;
            gl[nr.lin_off..nr.lin_off + bu.len()].copy_from_slice(bu.as_slice());
            let ru = &nr.r * &um;
            gs[nr.soc_off..nr.soc_off + ru.len()].copy_from_slice(ru.as_slice());
        }
        (gl, gs)
    }

    /// `G^T z` as `(u-part, t-part)`.
    fn gt(&self, zl: &[f64], zs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let k = self.k;
        let mut gu = vec![0.0; k];
        let mut gtt = vec![0.0; k];
        for i in 0..k {
            gu[i] = zl[i] - zl[k + i];
            gtt[i] = -zl[i] - zl[k + i];
        }
        for (m, nr) in self.neurons.iter().enumerate() {
            let z3 = DVector::from_column_slice(&zl[nr.lin_off..nr.lin_off + nr.c.len()]);
            let zq = DVector::from_column_slice(&zs[nr.soc_off..nr.soc_off + nr.yhat.len()]);
            let add = nr.b.tr_mul(&z3) + nr.r.tr_mul(&zq);
            for (a, b) in gu[m * self.n..(m + 1) * self.n].iter_mut().zip(add.iter()) {
                *a += b;
            }
        }
        (gu, gtt)
    }
}

/// Nesterov-Todd scaling of one second-order cone: `W = beta (2 v v^T - J)`.
struct SocScaling {
    beta: f64,
    v: Vec<f64>,
}

fn jnorm(u: &[f64]) -> f64 {
    (u[0] * u[0] - u[1..].iter().map(|x| x * x).sum::<f64>()).max(0.0).sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl SocScaling {
    fn new(s: &[f64], z: &[f64]) -> Self {
        let sn = jnorm(s);
        let zn = jnorm(z);
        let sb: Vec<f64> = s.iter().map(|v| v / sn).collect();
        let zb: Vec<f64> = z.iter().map(|v| v / zn).collect();
        let gamma = ((1.0 + dot(&sb, &zb)) / 2.0).sqrt();
        // w = (s + J z) / (2 gamma)
        let wb: Vec<f64> = sb
            .iter()
            .zip(&zb)
            .enumerate()
            .map(|(i, (a, b))| if i == 0 { a + b } else { a - b } / (2.0 * gamma))
            .collect();
        let den = (2.0 * (wb[0] + 1.0)).sqrt();
        let mut v: Vec<f64> = wb.iter().map(|x| x / den).collect();
        v[0] += 1.0 / den;
        Self { beta: (sn / zn).sqrt(), v }
    }

    /// `W y`
    fn apply(&self, y: &[f64]) -> Vec<f64> {
        let vy = dot(&self.v, y);
        let mut out: Vec<f64> = self.v.iter().map(|vi| 2.0 * vi * vy).collect();
        out[0] -= y[0];
        for i in 1..y.len() {
            out[i] += y[i];
        }
        out.iter_mut().for_each(|o| *o *= self.beta);
        out
    }

    /// `W^{-1} y = (2 a a^T - J) y / beta` with `a = J v`.
    fn apply_inv(&self, y: &[f64]) -> Vec<f64> {
        let a: Vec<f64> = self.v.iter().enumerate().map(|(i, x)| if i == 0 { *x } else { -x }).collect();
        let ay = dot(&a, y);
        let mut out: Vec<f64> = a.iter().map(|ai| 2.0 * ai * ay).collect();
        out[0] -= y[0];
        for i in 1..y.len() {
            out[i] += y[i];
        }
        out.iter_mut().for_each(|o| *o /= self.beta);
        out
    }
}

/// Jordan product on the cone.
fn soc_prod(u: &[f64], v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; u.len()];
    out[0] = dot(u, v);
    for i in 1..u.len() {
        out[i] = u[0] * v[i] + v[0] * u[i];
    }
    out
}

/// `x` with `l o x = d`.
fn soc_div(l: &[f64], d: &[f64]) -> Vec<f64> {
    let l1d1: f64 = dot(&l[1..], &d[1..]);
    let det = l[0] * l[0] - dot(&l[1..], &l[1..]);
    let x0 = (l[0] * d[0] - l1d1) / det;
    let mut out = vec![0.0; l.len()];
    out[0] = x0;
    for i in 1..l.len() {
        out[i] = (d[i] - x0 * l[i]) / l[0];
    }
    out
}

/// Largest `alpha` keeping `u + alpha d` in the cone.
fn soc_step(u: &[f64], d: &[f64]) -> f64 {
    let mut amax = f64::INFINITY;
    if d[0] < 0.0 {
        amax = -u[0] / d[0];
    }
    let a = d[0] * d[0] - dot(&d[1..], &d[1..]);
    let b = u[0] * d[0] - dot(&u[1..], &d[1..]);
    let c = (u[0] * u[0] - dot(&u[1..], &u[1..])).max(0.0);
    let disc = b * b - a * c;
    if a.abs() < 1e-300 {
        if b < 0.0 {
            amax = amax.min(-c / (2.0 * b));
        }
    } else if disc >= 0.0 {
        let sq = disc.sqrt();
        let qq = -(b + b.signum() * sq);
        for root in [qq / a, if qq != 0.0 { c / qq } else { f64::INFINITY }] {
            if root > 0.0 {
                amax = amax.min(root);
            }
        }
    }
    amax
}

fn lin_step(u: &[f64], d: &[f64]) -> f64 {
    u.iter()
        .zip(d)
        .filter(|(_, di)| **di < 0.0)
        .fold(f64::INFINITY, |m, (ui, di)| m.min(-ui / di))
}

struct Factored {
    chol: Vec<Cholesky<f64, Dyn>>,
    /// `delta_i` from eliminating `t`, and the `u`-`t` coupling ratio.
    ratio: Vec<f64>,
    dsum: Vec<f64>,
    p: DVector<f64>,
    ainv_p: DVector<f64>,
    omega: f64,
}

#[derive(Clone)]
struct State {
    u: Vec<f64>,
    t: Vec<f64>,
    sl: Vec<f64>,
    ss: Vec<f64>,
    zl: Vec<f64>,
    zs: Vec<f64>,
}

pub(crate) fn solve(q: &QcqpData) -> Option<IpmPoint> {
    let prog = build(q)?;
    let k = prog.k;
    let lin = prog.lin;
    let deg = (lin + 1) as f64;

    let shift = |h: &[f64], soc: bool| -> f64 {
        if soc { h[1..].iter().map(|x| x * x).sum::<f64>().sqrt() - h[0] } else { h.iter().fold(f64::NEG_INFINITY, |m, v| m.max(-v)) }
    };
    let a_p = shift(&prog.h_lin, false).max(shift(&prog.h_soc, true));
    let off = if a_p >= 0.0 { 1.0 + a_p } else { 0.0 };
    let mut st = State {
        u: vec![0.0; k],
        t: vec![0.0; k],
        sl: prog.h_lin.iter().map(|v| v + off).collect(),
        ss: {
            let mut s = prog.h_soc.clone();
            s[0] += off;
            s
        },
        zl: vec![1.0; lin],
        zs: {
            let mut z = vec![0.0; prog.soc];
            z[0] = 1.0;
            z
        },
    };
    let hnorm = prog.h_lin.iter().chain(&prog.h_soc).fold(0.0f64, |m, v| m.max(v.abs()));

    let mut best: Option<(f64, State)> = None;
    let mut err = f64::INFINITY;
    for _ in 0..MAX_ITERS {
        let (gl, gs) = prog.g(&st.u, &st.t);
        let rzl: Vec<f64> = (0..lin).map(|i| gl[i] + st.sl[i] - prog.h_lin[i]).collect();
        let rzs: Vec<f64> = (0..prog.soc).map(|i| gs[i] + st.ss[i] - prog.h_soc[i]).collect();
        let (gu, gtt) = prog.gt(&st.zl, &st.zs);
        let rxu = gu;
        let rxt: Vec<f64> = gtt.iter().map(|v| v + 1.0).collect();
        let gap = dot(&st.sl, &st.zl) + dot(&st.ss, &st.zs);
        let pcost: f64 = st.t.iter().sum();
        let pres = rzl.iter().chain(&rzs).fold(0.0f64, |m, v| m.max(v.abs()));
        let dres = rxu.iter().chain(&rxt).fold(0.0f64, |m, v| m.max(v.abs()));
        let zscale = st.zl.iter().chain(&st.zs).fold(1.0f64, |m, v| m.max(v.abs()));
        err = (pres / (1.0 + hnorm)).max(dres / zscale).max(gap / pcost.abs().max(1.0));
        if err <= TOL {
            best = None;
            break;
        }
        if err <= LOOSE_TOL && best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, st.clone()));
        } else if best.as_ref().is_some_and(|(e, _)| err > 100.0 * e) {
            break;
        }
        let mu = gap / deg;

        let scal = SocScaling::new(&st.ss, &st.zs);
        let lam_l: Vec<f64> = st.sl.iter().zip(&st.zl).map(|(s, z)| (s * z).sqrt()).collect();
        let lam_s = scal.apply(&st.zs);
        let d: Vec<f64> = st.zl.iter().zip(&st.sl).map(|(z, s)| z / s).collect();

        let fac = factor(&prog, &d, &scal)?;
        let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<f64>>();
        let mut rhs = Rhs {
            bxu: neg(&rxu),
            bxt: neg(&rxt),
            bzl: neg(&rzl),
            bzs: neg(&rzs),
            dl: lam_l.iter().map(|l| -l * l).collect(),
            dsoc: neg(&soc_prod(&lam_s, &lam_s)),
        };
        let cx = Ctx {
            sl: &st.sl,
            d,
            scal,
            lam_l,
            lam_s,
        };
        let (d, scal, lam_l, lam_s) = (&cx.d, &cx.scal, &cx.lam_l, &cx.lam_s);

        // predictor
        let aff = refined(&prog, &fac, &cx, &rhs);
        let alpha_aff = step_length(&st, &aff).min(1.0);
        let gap_aff = (0..lin)
            .map(|i| (st.sl[i] + alpha_aff * aff.sl[i]) * (st.zl[i] + alpha_aff * aff.zl[i]))
            .sum::<f64>()
            + (0..prog.soc)
                .map(|i| (st.ss[i] + alpha_aff * aff.ss[i]) * (st.zs[i] + alpha_aff * aff.zs[i]))
                .sum::<f64>();
        let sigma = (gap_aff / gap).clamp(0.0, 1.0).powi(3);

        // corrector: scaled affine directions
        let dsl_t: Vec<f64> = (0..lin).map(|i| aff.sl[i] * (d[i]).sqrt()).collect();
        let dzl_t: Vec<f64> = (0..lin).map(|i| aff.zl[i] / (d[i]).sqrt()).collect();
        let dss_t = scal.apply_inv(&aff.ss);
        let dzs_t = scal.apply(&aff.zs);
        rhs.dl = (0..lin)
            .map(|i| -lam_l[i] * lam_l[i] - dsl_t[i] * dzl_t[i] + sigma * mu)
            .collect();
        let cross = soc_prod(&dss_t, &dzs_t);
        let ll = soc_prod(lam_s, lam_s);
        rhs.dsoc = (0..prog.soc).map(|i| -ll[i] - cross[i]).collect();
        rhs.dsoc[0] += sigma * mu;
        let dir = refined(&prog, &fac, &cx, &rhs);
        drop(cx);
        let alpha = (STEP * step_length(&st, &dir)).min(1.0);
        for i in 0..k {
            st.u[i] += alpha * dir.u[i];
            st.t[i] += alpha * dir.t[i];
        }
        for i in 0..lin {
            st.sl[i] += alpha * dir.sl[i];
            st.zl[i] += alpha * dir.zl[i];
        }
        for i in 0..prog.soc {
            st.ss[i] += alpha * dir.ss[i];
            st.zs[i] += alpha * dir.zs[i];
        }
        if st.u.iter().chain(&st.zl).chain(&st.zs).any(|v| !v.is_finite()) {
            return None;
        }
    }
    if let Some((_, b)) = best {
        st = b;
    } else if err > TOL {
        return None;
    }

    let u = DMatrix::from_column_slice(prog.n, q.outputs(), &st.u);
    let mut ineq = vec![0.0; q.pattern().omega_c().len()];
    let mut ineq_slack = Vec::new();
    for nr in &prog.neurons {
        for (j, &id) in nr.ids.iter().enumerate() {
            ineq[id] = st.zl[nr.lin_off + j];
            ineq_slack.push((id, st.sl[nr.lin_off + j], st.zl[nr.lin_off + j]));
        }
    }
    // z_1 = -(z_0 / s_0) s_1 holds only on the central path; fit it instead
    let s1 = &st.ss[1..];
    let ss = dot(s1, s1);
    let lambda = if ss > 0.0 { -dot(&st.zs[1..], s1) / ss } else { st.zs[0] / prog.eps_red };
    Some(IpmPoint {
        u,
        mult: Multipliers {
            fit: FitMultiplier::Ball(lambda),
            ineq,
        },
        ineq_slack,
    })
}

fn step_length(st: &State, dir: &State) -> f64 {
    lin_step(&st.sl, &dir.sl)
        .min(lin_step(&st.zl, &dir.zl))
        .min(soc_step(&st.ss, &dir.ss))
        .min(soc_step(&st.zs, &dir.zs))
}

fn factor(prog: &Program, d: &[f64], scal: &SocScaling) -> Option<Factored> {
    let (n, k) = (prog.n, prog.k);
    let d1 = &d[..k];
    let d2 = &d[k..2 * k];
    let dsum: Vec<f64> = (0..k).map(|i| d1[i] + d2[i]).collect();
    let ratio: Vec<f64> = (0..k).map(|i| (d2[i] - d1[i]) / dsum[i]).collect();
    let ib2 = 1.0 / (scal.beta * scal.beta);
    // cone part: beta^-2 (R^T R + 4(|v|^2 + 1) p p^T) with p = R^T a_{1:}
    let vv = dot(&scal.v, &scal.v);
    let omega = 4.0 * ib2 * (vv + 1.0);
    let mut p = DVector::zeros(k);
    let mut chol = Vec::with_capacity(prog.neurons.len());
    for (m, nr) in prog.neurons.iter().enumerate() {
        let a1 = DVector::from_iterator(nr.yhat.len(), (0..nr.yhat.len()).map(|i| -scal.v[nr.soc_off + i]));
        p.rows_mut(m * n, n).copy_from(&nr.r.tr_mul(&a1));
        let d3 = &d[nr.lin_off..nr.lin_off + nr.c.len()];
        let mut bd = nr.b.clone();
        for (j, dj) in d3.iter().enumerate() {
            bd.row_mut(j).scale_mut(*dj);
        }
        let mut a = nr.b.tr_mul(&bd) + &nr.rtr * ib2;
        for i in 0..n {
            let g = m * n + i;
            a[(i, i)] += dsum[g] - (d2[g] - d1[g]).powi(2) / dsum[g];
        }
        chol.push(a.cholesky()?);
    }
    let ainv_p = block_solve(&chol, n, &p);
    Some(Factored {
        chol,
        ratio,
        dsum,
        p,
        ainv_p,
        omega,
    })
}

fn block_solve(chol: &[Cholesky<f64, Dyn>], n: usize, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(b.len());
    for (m, c) in chol.iter().enumerate() {
        out.rows_mut(m * n, n).copy_from(&c.solve(&b.rows(m * n, n).into_owned()));
    }
    out
}

/// Scaling at the current iterate.
struct Ctx<'a> {
    sl: &'a [f64],
    d: Vec<f64>,
    scal: SocScaling,
    lam_l: Vec<f64>,
    lam_s: Vec<f64>,
}

/// Right-hand side of `G^T dz = bx`, `G dx + ds = bz`, `lambda o (W dz + W^-T ds) = d`.
struct Rhs {
    bxu: Vec<f64>,
    bxt: Vec<f64>,
    bzl: Vec<f64>,
    bzs: Vec<f64>,
    dl: Vec<f64>,
    dsoc: Vec<f64>,
}

fn newton(prog: &Program, fac: &Factored, cx: &Ctx, r: &Rhs) -> State {
    let k = prog.k;
    let lin = prog.lin;
    let d = &cx.d;
    // zeta = W^-2 bz - W^-1 (lambda \ ds)
    let zeta_l: Vec<f64> = (0..lin).map(|i| d[i] * r.bzl[i] - r.dl[i] / cx.sl[i]).collect();
    let w2bz = cx.scal.apply_inv(&cx.scal.apply_inv(&r.bzs));
    let wl = cx.scal.apply_inv(&soc_div(&cx.lam_s, &r.dsoc));
    let zeta_s: Vec<f64> = (0..prog.soc).map(|i| w2bz[i] - wl[i]).collect();
    let (gu, gtt) = prog.gt(&zeta_l, &zeta_s);
    let ru: Vec<f64> = (0..k).map(|i| r.bxu[i] + gu[i]).collect();
    let rt: Vec<f64> = (0..k).map(|i| r.bxt[i] + gtt[i]).collect();
    let rhs = DVector::from_iterator(k, (0..k).map(|i| ru[i] - fac.ratio[i] * rt[i]));
    let y = block_solve(&fac.chol, prog.n, &rhs);
    let corr = fac.omega * fac.p.dot(&y) / (1.0 + fac.omega * fac.p.dot(&fac.ainv_p));
    let du = &y - &fac.ainv_p * corr;
    let du: Vec<f64> = du.iter().copied().collect();
    let dt: Vec<f64> = (0..k).map(|i| (rt[i] - (fac.dsum[i] * fac.ratio[i]) * du[i]) / fac.dsum[i]).collect();
    let (gl, gs) = prog.g(&du, &dt);
    let dsl: Vec<f64> = (0..lin).map(|i| r.bzl[i] - gl[i]).collect();
    let dss: Vec<f64> = (0..prog.soc).map(|i| r.bzs[i] - gs[i]).collect();
    let dzl: Vec<f64> = (0..lin).map(|i| d[i] * gl[i] - zeta_l[i]).collect();
    let w2g = cx.scal.apply_inv(&cx.scal.apply_inv(&gs));
    let dzs: Vec<f64> = (0..prog.soc).map(|i| w2g[i] - zeta_s[i]).collect();
    State {
        u: du,
        t: dt,
        sl: dsl,
        ss: dss,
        zl: dzl,
        zs: dzs,
    }
}

/// Newton step plus one round of iterative refinement on the full system.
fn refined(prog: &Program, fac: &Factored, cx: &Ctx, r: &Rhs) -> State {
    let mut dir = newton(prog, fac, cx, r);
    let (gu, gtt) = prog.gt(&dir.zl, &dir.zs);
    let (gl, gs) = prog.g(&dir.u, &dir.t);
    let wz = cx.scal.apply(&dir.zs);
    let ws = cx.scal.apply_inv(&dir.ss);
    let mixed: Vec<f64> = wz.iter().zip(&ws).map(|(a, b)| a + b).collect();
    let lm = soc_prod(&cx.lam_s, &mixed);
    let err = Rhs {
        bxu: (0..prog.k).map(|i| r.bxu[i] - gu[i]).collect(),
        bxt: (0..prog.k).map(|i| r.bxt[i] - gtt[i]).collect(),
        bzl: (0..prog.lin).map(|i| r.bzl[i] - gl[i] - dir.sl[i]).collect(),
        bzs: (0..prog.soc).map(|i| r.bzs[i] - gs[i] - dir.ss[i]).collect(),
        dl: (0..prog.lin)
            .map(|i| {
                let w = (1.0 / cx.d[i]).sqrt();
                r.dl[i] - cx.lam_l[i] * (dir.zl[i] * w + dir.sl[i] / w)
            })
            .collect(),
        dsoc: (0..prog.soc).map(|i| r.dsoc[i] - lm[i]).collect(),
    };
    let fix = newton(prog, fac, cx, &err);
    let add = |a: &mut Vec<f64>, b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    add(&mut dir.u, &fix.u);
    add(&mut dir.t, &fix.t);
    add(&mut dir.sl, &fix.sl);
    add(&mut dir.ss, &fix.ss);
    add(&mut dir.zl, &fix.zl);
    add(&mut dir.zs, &fix.zs);
    dir
}
