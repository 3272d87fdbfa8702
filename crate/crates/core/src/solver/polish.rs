//! Active-set refinement of an approximate splitting iterate.
//!
//! Given a support with signs and a set of tight inequalities, the
//! `l1` program restricted to that face has a closed-form solution (a linear
//! system when the fit is an equality or inactive, a linear objective over an
//! ellipsoid slice otherwise). The candidate is accepted only if it passes a
//! full KKT check, so a wrong guess costs time but never correctness.

use nalgebra::{DMatrix, DVector};

use super::kkt::{kkt_with_scales, FitMultiplier, Multipliers};
use super::linalg::{lstsq, null_space};
use super::nnls::nnls;
use crate::constraints::QcqpData;

/// Per-neuron slices of a (scaled) program.
pub(crate) struct Blocks {
    neurons: Vec<NeuronBlock>,
}

struct NeuronBlock {
    /// `X_{:,Omega_m}^T`
    g: DMatrix<f64>,
    /// `X_{:,Omega^c_m}^T`
    b: DMatrix<f64>,
    y: DVector<f64>,
    c: DVector<f64>,
    omega_ids: Vec<usize>,
    omega_c_ids: Vec<usize>,
}

impl Blocks {
    pub(crate) fn new(q: &QcqpData) -> Self {
        let pat = q.pattern();
        let mut neurons: Vec<NeuronBlock> = (0..q.outputs())
            .map(|_| NeuronBlock {
                g: DMatrix::zeros(0, 0),
                b: DMatrix::zeros(0, 0),
                y: DVector::zeros(0),
                c: DVector::zeros(0),
                omega_ids: Vec::new(),
                omega_c_ids: Vec::new(),
            })
            .collect();
        for (k, &i) in pat.omega().iter().enumerate() {
            neurons[pat.split(i).0].omega_ids.push(k);
        }
        for (k, &i) in pat.omega_c().iter().enumerate() {
            neurons[pat.split(i).0].omega_c_ids.push(k);
        }
        let x = q.x();
        for (m, nb) in neurons.iter_mut().enumerate() {
            let om: Vec<usize> = nb.omega_ids.iter().map(|&k| pat.split(pat.omega()[k]).1).collect();
            let omc: Vec<usize> = nb
                .omega_c_ids
                .iter()
                .map(|&k| pat.split(pat.omega_c()[k]).1)
                .collect();
            nb.g = x.select_columns(&om).transpose();
            nb.b = x.select_columns(&omc).transpose();
            nb.y = DVector::from_iterator(om.len(), om.iter().map(|&p| q.targets()[(m, p)]));
            nb.c = DVector::from_iterator(omc.len(), omc.iter().map(|&p| q.bounds()[(m, p)]));
        }
        Self { neurons }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub(crate) struct ActiveSet {
    /// Support of each neuron's weight column with signs (`true` = positive).
    pub support: Vec<Vec<(usize, bool)>>,
    /// Tight inequalities of each neuron, as local indices into its `Omega^c`.
    pub tight: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Face {
    /// `eps = 0`: fit rows hold with equality.
    Equality,
    /// Fit constraint slack; the point is a vertex of the inequality polytope.
    Vertex,
    /// Fit constraint tight with a positive multiplier.
    Ball,
}

/// Active-set corrections tried after a rejected face.
pub(crate) const REFINE_ROUNDS: usize = 8;

pub(crate) struct Tolerances {
    pub feasibility: f64,
    pub optimality: f64,
}

fn sign(b: bool) -> f64 {
    if b { 1.0 } else { -1.0 }
}

/// Multiplier anchor taken from the splitting iterate (scaled space).
pub(crate) struct Anchor<'a> {
    pub fit: &'a [f64],
    pub ineq: &'a [f64],
}

/// Solves `M theta = rhs` on the support rows with `theta` nonnegative except
/// for the first `n_free` entries, weakly pulled toward `anchor`.
fn face_multipliers(m: &DMatrix<f64>, rhs: &DVector<f64>, n_free: usize, anchor: &DVector<f64>) -> DVector<f64> {
    let cols = m.ncols();
    if cols == 0 {
        return DVector::zeros(0);
    }
    let mu = 1e-7;
    let rows = m.nrows();
    let mut a = DMatrix::zeros(rows + cols, cols);
    a.view_mut((0, 0), (rows, cols)).copy_from(m);
    let mut b = DVector::zeros(rows + cols);
    b.rows_mut(0, rows).copy_from(rhs);
    for j in 0..cols {
        a[(rows + j, j)] = mu;
        b[rows + j] = mu * anchor[j];
    }
    let free: Vec<bool> = (0..cols).map(|j| j < n_free).collect();
    nnls(&a, &b, &free)
}

struct Restricted {
    idx: Vec<usize>,
    sigma: DVector<f64>,
    g_s: DMatrix<f64>,
    b_js: DMatrix<f64>,
    c_j: DVector<f64>,
}

fn restrict(nb: &NeuronBlock, support: &[(usize, bool)], tight: &[usize]) -> Restricted {
    let idx: Vec<usize> = support.iter().map(|s| s.0).collect();
    let sigma = DVector::from_iterator(idx.len(), support.iter().map(|s| sign(s.1)));
    let g_s = nb.g.select_columns(&idx);
    let b_js = nb.b.select_rows(tight).select_columns(&idx);
    let c_j = DVector::from_iterator(tight.len(), tight.iter().map(|&j| nb.c[j]));
    Restricted { idx, sigma, g_s, b_js, c_j }
}

pub(crate) fn attempt(
    q: &QcqpData,
    blocks: &Blocks,
    set: &ActiveSet,
    face: Face,
    anchor: Option<&Anchor<'_>>,
    tol: &Tolerances,
) -> std::result::Result<(DMatrix<f64>, Multipliers), (DMatrix<f64>, Multipliers)> {
    let n = q.inputs();
    let eps = q.epsilon();
    let mut u = DMatrix::zeros(n, q.outputs());
    let mut ineq = vec![0.0; q.pattern().omega_c().len()];
    let mut zeta = vec![0.0; q.pattern().omega().len()];
    let parts: Vec<Restricted> = blocks
        .neurons
        .iter()
        .enumerate()
        .map(|(m, nb)| restrict(nb, &set.support[m], &set.tight[m]))
        .collect();

    let mut lambda = 0.0;
    match face {
        Face::Equality | Face::Vertex => {
            for (m, (nb, part)) in blocks.neurons.iter().zip(&parts).enumerate() {
                if part.idx.is_empty() {
                    continue;
                }
                let (sys, rhs) = if face == Face::Equality {
                    let mut sys = DMatrix::zeros(part.g_s.nrows() + part.b_js.nrows(), part.idx.len());
                    sys.view_mut((0, 0), part.g_s.shape()).copy_from(&part.g_s);
                    sys.view_mut((part.g_s.nrows(), 0), part.b_js.shape()).copy_from(&part.b_js);
                    let mut rhs = DVector::zeros(sys.nrows());
                    rhs.rows_mut(0, nb.y.len()).copy_from(&nb.y);
                    rhs.rows_mut(nb.y.len(), part.c_j.len()).copy_from(&part.c_j);
                    (sys, rhs)
                } else {
                    (part.b_js.clone(), part.c_j.clone())
                };
                let a = lstsq(&sys, &rhs);
                for (k, &i) in part.idx.iter().enumerate() {
                    u[(i, m)] = a[k];
                }
            }
        }
        Face::Ball => {
            struct Reduced {
                a_p: DVector<f64>,
                z: DMatrix<f64>,
                t0: DVector<f64>,
                hinv_gz: DVector<f64>,
            }
            let mut reduced = Vec::with_capacity(parts.len());
            let mut rest = 0.0;
            let mut kappa2 = 0.0;
            for (nb, part) in blocks.neurons.iter().zip(&parts) {
                let s = part.idx.len();
                let a_p = lstsq(&part.b_js, &part.c_j);
                let z = null_space(&part.b_js, s);
                let f = &part.g_s * &z;
                let r0 = &part.g_s * &a_p - &nb.y;
                let t0 = lstsq(&f, &(-&r0));
                let r_perp = &f * &t0 + &r0;
                rest += r_perp.norm_squared();
                let gz = z.tr_mul(&part.sigma);
                let hinv_gz = if z.ncols() == 0 {
                    DVector::zeros(0)
                } else {
                    let h = f.tr_mul(&f);
                    let Some(chol) = h.cholesky() else {
                        return Err((u, Multipliers::zero(q)));
                    };
                    chol.solve(&gz)
                };
                kappa2 += gz.dot(&hinv_gz);
                reduced.push(Reduced { a_p, z, t0, hinv_gz });
            }
            let rho2 = eps * eps - rest;
            if !(rho2 > 0.0) {
                return Err((u, Multipliers::zero(q)));
            }
            let rho = rho2.sqrt();
            let kappa = kappa2.max(0.0).sqrt();
            let step = if kappa > 1e-14 { rho / kappa } else { 0.0 };
            lambda = if kappa > 1e-14 { kappa / rho } else { 0.0 };
            for (m, (part, red)) in parts.iter().zip(&reduced).enumerate() {
                if part.idx.is_empty() {
                    continue;
                }
                let t = &red.t0 - &red.hinv_gz * step;
                let a = &red.a_p + &red.z * t;
                for (k, &i) in part.idx.iter().enumerate() {
                    u[(i, m)] = a[k];
                }
            }
        }
    }

    // multipliers, neuron by neuron
    for (m, (nb, part)) in blocks.neurons.iter().zip(&parts).enumerate() {
        let col = DVector::from_iterator(n, (0..n).map(|i| u[(i, m)]));
        let n_free = if face == Face::Equality { nb.y.len() } else { 0 };
        let b_j = nb.b.select_rows(&set.tight[m]);
        // full system over all coordinates: g = [G^T | B_J^T] theta + lambda G^T r
        let mut full = DMatrix::zeros(n, n_free + b_j.nrows());
        if n_free > 0 {
            full.view_mut((0, 0), (n, n_free)).copy_from(&nb.g.transpose());
        }
        full.view_mut((0, n_free), (n, b_j.nrows())).copy_from(&b_j.transpose());
        let mut base = DVector::zeros(n);
        if face == Face::Ball && lambda != 0.0 {
            let r = &nb.g * &col - &nb.y;
            base = nb.g.tr_mul(&r) * lambda;
        }
        if full.ncols() == 0 {
            continue;
        }
        let anchor_vec = DVector::from_iterator(
            full.ncols(),
            (0..full.ncols()).map(|j| match anchor {
                None => 0.0,
                Some(an) => {
                    if j < n_free {
                        an.fit[nb.omega_ids[j]]
                    } else {
                        an.ineq[nb.omega_c_ids[set.tight[m][j - n_free]]].max(0.0)
                    }
                }
            }),
        );
        let on = &part.idx;
        let off: Vec<usize> = (0..n).filter(|i| !on.contains(i)).collect();
        let target = |i: usize, k: Option<usize>| -base[i] - k.map_or(0.0, |k| part.sigma[k]);
        let off_ok = |theta: &DVector<f64>| {
            let g = &full * theta + &base;
            off.iter().all(|&i| g[i].abs() <= 1.0 + tol.optimality)
        };
        let rhs_on = DVector::from_iterator(on.len(), (0..on.len()).map(|k| target(on[k], Some(k))));
        let mut theta = face_multipliers(&full.select_rows(on), &rhs_on, n_free, &anchor_vec);
        if !off.is_empty() && !off_ok(&theta) {
            // trade a little support accuracy for off-support feasibility
            let w = 1e6;
            let mut sys = DMatrix::zeros(n, full.ncols());
            let mut rhs = DVector::zeros(n);
            for (row, i) in on.iter().chain(&off).enumerate() {
                let k = on.iter().position(|j| j == i);
                let scale = if k.is_some() { w } else { 1.0 };
                sys.row_mut(row).copy_from(&(full.row(*i) * scale));
                rhs[row] = target(*i, k) * scale;
            }
            let alt = face_multipliers(&sys, &rhs, n_free, &anchor_vec);
            if off_ok(&alt) {
                theta = alt;
            }
        }
        for j in 0..n_free {
            zeta[nb.omega_ids[j]] = theta[j];
        }
        for (k, &t) in set.tight[m].iter().enumerate() {
            ineq[nb.omega_c_ids[t]] = theta[n_free + k];
        }
    }
    let fit = if eps > 0.0 {
        FitMultiplier::Ball(lambda)
    } else {
        FitMultiplier::Equality(zeta)
    };
    let mult = Multipliers { fit, ineq };
    let res = kkt_with_scales(q, &u, &mult, 1.0, 1.0);
    let feasible = res.primal_fit <= tol.feasibility && res.primal_ineq <= tol.feasibility;
    if feasible && res.optimality() <= tol.optimality {
        Ok((u, mult))
    } else {
        Err((u, mult))
    }
}

/// One primal active-set step from a rejected candidate: drop support entries
/// whose sign flipped, add the worst off-support coordinate whose multiplier
/// gradient exceeds one, and add the most violated inequality. Returns `None`
/// when nothing changes.
pub(crate) fn refine(
    q: &QcqpData,
    blocks: &Blocks,
    set: &ActiveSet,
    u: &DMatrix<f64>,
    mult: &Multipliers,
    tol: &Tolerances,
) -> Option<ActiveSet> {
    let n = q.inputs();
    let uv = u.as_slice();
    let mut g = q.ineq_adjoint(&mult.ineq);
    let r: Vec<f64> = q.fit_apply(uv).iter().zip(q.y_omega()).map(|(a, b)| a - b).collect();
    match &mult.fit {
        FitMultiplier::Ball(l) => {
            for (gi, fi) in g.iter_mut().zip(q.fit_adjoint(&r)) {
                *gi += l * fi;
            }
        }
        FitMultiplier::Equality(z) => {
            for (gi, fi) in g.iter_mut().zip(q.fit_adjoint(z)) {
                *gi += fi;
            }
        }
    }
    let w = q.ineq_apply(uv);
    let c = q.c();
    let mut next = set.clone();
    for (m, nb) in blocks.neurons.iter().enumerate() {
        let sup = &mut next.support[m];
        let before = sup.len();
        sup.retain(|&(i, pos)| uv[m * n + i] * sign(pos) > 0.0);
        if sup.len() < before {
            // a flip means some tight row is pinning the face; release the idle ones
            next.tight[m].retain(|&j| mult.ineq[nb.omega_c_ids[j]] > 0.0);
        }
        let sup = &mut next.support[m];
        let worst = (0..n)
            .filter(|i| !set.support[m].iter().any(|s| s.0 == *i))
            .map(|i| (i, g[m * n + i]))
            .filter(|(_, gi)| gi.abs() > 1.0 + tol.optimality)
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()));
        if let Some((i, gi)) = worst {
            sup.push((i, gi < 0.0));
            sup.sort_unstable();
        }
        let tight = &mut next.tight[m];
        let violated = nb
            .omega_c_ids
            .iter()
            .enumerate()
            .filter(|(j, _)| !tight.contains(j))
            .map(|(j, &k)| (j, w[k] - c[k]))
            .filter(|(_, v)| *v > tol.feasibility)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((j, _)) = violated {
            tight.push(j);
            tight.sort_unstable();
        }
    }
    (next != *set).then_some(next)
}
