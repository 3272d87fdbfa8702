//! The convex constraint set that replaces `max(U^T X, 0) ~ Y`.
//!
//! For each output entry `(m, p)`: if `y[m,p] > 0` the prediction `u_m^T x_p`
//! joins a sum of squares bounded by `eps^2`; otherwise it must stay below
//! the slack `v[m,p]`. Vectorized forms use `u = vec(U)` (column stacking, index
//! `m*N + n`) and the 0-based linear output index `m*P + p`. The Kronecker
//! operator `I_M (x) X` is never materialized.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivePattern {
    outputs: usize,
    samples: usize,
    omega: Vec<usize>,
    omega_c: Vec<usize>,
}

impl ActivePattern {
    fn from_predicate(y: &DMatrix<f64>, active: impl Fn(f64) -> bool) -> Self {
        let (m_count, p_count) = y.shape();
        let mut omega = Vec::new();
        let mut omega_c = Vec::new();
        for m in 0..m_count {
            for p in 0..p_count {
                let idx = m * p_count + p;
                if active(y[(m, p)]) {
                    omega.push(idx);
                } else {
                    omega_c.push(idx);
                }
            }
        }
        Self {
            outputs: m_count,
            samples: p_count,
            omega,
            omega_c,
        }
    }

    /// Every entry active; used for linear layers.
    pub fn full(outputs: usize, samples: usize) -> Self {
        Self {
            outputs,
            samples,
            omega: (0..outputs * samples).collect(),
            omega_c: Vec::new(),
        }
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn omega(&self) -> &[usize] {
        &self.omega
    }

    pub fn omega_c(&self) -> &[usize] {
        &self.omega_c
    }

    pub fn split(&self, idx: usize) -> (usize, usize) {
        (idx / self.samples, idx % self.samples)
    }

    /// Row-major activity mask over the `M x P` output grid.
    pub fn mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.outputs * self.samples];
        for &i in &self.omega {
            mask[i] = true;
        }
        mask
    }
}

fn check_nonnegative(y: &DMatrix<f64>) -> Result<()> {
    for m in 0..y.nrows() {
        for p in 0..y.ncols() {
            let v = y[(m, p)];
            if !v.is_finite() {
                return Err(Error::NonFinite("target"));
            }
            if v < 0.0 {
                return Err(Error::NegativeTarget { row: m, col: p, value: v });
            }
        }
    }
    Ok(())
}

/// Strict-positivity split of a nonnegative target.
pub fn active_pattern(y: &DMatrix<f64>) -> Result<ActivePattern> {
    check_nonnegative(y)?;
    Ok(ActivePattern::from_predicate(y, |v| v > 0.0))
}

/// Like [`active_pattern`] but entries at or below `threshold` count as inactive.
pub fn active_pattern_with_threshold(y: &DMatrix<f64>, threshold: f64) -> Result<ActivePattern> {
    if !(threshold >= 0.0) {
        return Err(Error::InvalidArgument(format!("activation threshold {threshold}")));
    }
    check_nonnegative(y)?;
    Ok(ActivePattern::from_predicate(y, |v| v > threshold))
}

/// `C_eps(X, Y, V)` before vectorization.
#[derive(Debug, Clone)]
pub struct LayerConstraintSpec {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub epsilon: f64,
    pub activation_threshold: f64,
}

impl LayerConstraintSpec {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>, v: DMatrix<f64>, epsilon: f64) -> Result<Self> {
        if x.ncols() != y.ncols() {
            return Err(Error::Dimension(format!(
                "X has {} samples, Y has {}",
                x.ncols(),
                y.ncols()
            )));
        }
        if v.shape() != y.shape() {
            return Err(Error::Dimension(format!(
                "V is {:?}, Y is {:?}",
                v.shape(),
                y.shape()
            )));
        }
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!("epsilon {epsilon}")));
        }
        if x.iter().chain(v.iter()).any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("constraint data"));
        }
        check_nonnegative(&y)?;
        Ok(Self {
            x,
            y,
            v,
            epsilon,
            activation_threshold: 0.0,
        })
    }

    /// Zero slack, as in the parallel scheme.
    pub fn parallel(x: DMatrix<f64>, y: DMatrix<f64>, epsilon: f64) -> Result<Self> {
        let v = DMatrix::zeros(y.nrows(), y.ncols());
        Self::new(x, y, v, epsilon)
    }

    pub fn with_activation_threshold(mut self, threshold: f64) -> Self {
        self.activation_threshold = threshold;
        self
    }
}

/// Vectorized layer program `min ||u||_1  s.t.  u^T Q u + 2 q^T u <= eps~,  P u <= c`.
#[derive(Debug, Clone)]
pub struct QcqpData {
    x: DMatrix<f64>,
    targets: DMatrix<f64>,
    bounds: DMatrix<f64>,
    pattern: ActivePattern,
    epsilon: f64,
}

pub fn build_layer_qcqp(spec: &LayerConstraintSpec) -> Result<QcqpData> {
    let pattern = active_pattern_with_threshold(&spec.y, spec.activation_threshold)?;
    let mut targets = spec.y.clone();
    for &i in pattern.omega_c() {
        let (m, p) = pattern.split(i);
        targets[(m, p)] = 0.0;
    }
    Ok(QcqpData {
        x: spec.x.clone(),
        targets,
        bounds: spec.v.clone(),
        pattern,
        epsilon: spec.epsilon,
    })
}

impl QcqpData {
    /// Linear-layer program: `||U^T X - Z||_F <= eps` with no inequalities.
    pub fn linear_fit(x: DMatrix<f64>, z: DMatrix<f64>, epsilon: f64) -> Result<Self> {
        if x.ncols() != z.ncols() {
            return Err(Error::Dimension(format!(
                "X has {} samples, Z has {}",
                x.ncols(),
                z.ncols()
            )));
        }
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!("epsilon {epsilon}")));
        }
        if x.iter().chain(z.iter()).any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("constraint data"));
        }
        let pattern = ActivePattern::full(z.nrows(), z.ncols());
        let bounds = DMatrix::zeros(z.nrows(), z.ncols());
        Ok(Self {
            x,
            targets: z,
            bounds,
            pattern,
            epsilon,
        })
    }

    /// Program restricted to a subset of output neurons, with its own tolerance.
    pub fn select_outputs(&self, outputs: &[usize], epsilon: f64) -> QcqpData {
        let p_count = self.samples();
        let targets = self.targets.select_rows(outputs);
        let bounds = self.bounds.select_rows(outputs);
        let mask = self.pattern.mask();
        let mut omega = Vec::new();
        let mut omega_c = Vec::new();
        for (k, &m) in outputs.iter().enumerate() {
            for p in 0..p_count {
                if mask[m * p_count + p] {
                    omega.push(k * p_count + p);
                } else {
                    omega_c.push(k * p_count + p);
                }
            }
        }
        QcqpData {
            x: self.x.clone(),
            targets,
            bounds,
            pattern: ActivePattern {
                outputs: outputs.len(),
                samples: p_count,
                omega,
                omega_c,
            },
            epsilon,
        }
    }

    /// Same program with `X / sx` and targets, bounds and `eps` divided by `sy`.
    pub(crate) fn rescaled(&self, sx: f64, sy: f64) -> QcqpData {
        QcqpData {
            x: &self.x / sx,
            targets: &self.targets / sy,
            bounds: &self.bounds / sy,
            pattern: self.pattern.clone(),
            epsilon: self.epsilon / sy,
        }
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn targets(&self) -> &DMatrix<f64> {
        &self.targets
    }

    pub fn bounds(&self) -> &DMatrix<f64> {
        &self.bounds
    }

    pub fn pattern(&self) -> &ActivePattern {
        &self.pattern
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn inputs(&self) -> usize {
        self.x.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.targets.nrows()
    }

    pub fn samples(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_vars(&self) -> usize {
        self.inputs() * self.outputs()
    }

    fn as_weights(&self, u: &[f64]) -> DMatrix<f64> {
        assert_eq!(u.len(), self.n_vars(), "u has wrong length");
        DMatrix::from_column_slice(self.inputs(), self.outputs(), u)
    }

    /// `U^T X`, the `M x P` prediction grid.
    pub fn predictions(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        u.tr_mul(&self.x)
    }

    fn gather(&self, grid: &DMatrix<f64>, idx: &[usize]) -> Vec<f64> {
        idx.iter()
            .map(|&i| {
                let (m, p) = self.pattern.split(i);
                grid[(m, p)]
            })
            .collect()
    }

    fn scatter_adjoint(&self, idx: &[usize], vals: &[f64]) -> Vec<f64> {
        assert_eq!(idx.len(), vals.len());
        let mut grid = DMatrix::zeros(self.outputs(), self.samples());
        for (&i, &v) in idx.iter().zip(vals) {
            let (m, p) = self.pattern.split(i);
            grid[(m, p)] = v;
        }
        // d/dU of <grid, U^T X> is X grid^T
        let g = &self.x * grid.transpose();
        g.as_slice().to_vec()
    }

    /// `(I_M (x) X)_{:,Omega}^T u`.
    pub fn fit_apply(&self, u: &[f64]) -> Vec<f64> {
        let pred = self.predictions(&self.as_weights(u));
        self.gather(&pred, self.pattern.omega())
    }

    pub fn fit_adjoint(&self, z: &[f64]) -> Vec<f64> {
        self.scatter_adjoint(self.pattern.omega(), z)
    }

    /// The inequality operator `P u`.
    pub fn ineq_apply(&self, u: &[f64]) -> Vec<f64> {
        let pred = self.predictions(&self.as_weights(u));
        self.gather(&pred, self.pattern.omega_c())
    }

    pub fn ineq_adjoint(&self, t: &[f64]) -> Vec<f64> {
        self.scatter_adjoint(self.pattern.omega_c(), t)
    }

    pub fn y_omega(&self) -> Vec<f64> {
        self.gather(&self.targets, self.pattern.omega())
    }

    /// Inequality bound `c = v_{Omega^c}`.
    pub fn c(&self) -> Vec<f64> {
        self.gather(&self.bounds, self.pattern.omega_c())
    }

    /// `Q u` with `Q = A_Omega A_Omega^T` applied matrix-free.
    pub fn quad_apply(&self, u: &[f64]) -> Vec<f64> {
        self.fit_adjoint(&self.fit_apply(u))
    }

    /// `q = -A_Omega y_Omega`.
    pub fn linear_term(&self) -> Vec<f64> {
        self.fit_adjoint(&self.y_omega()).into_iter().map(|v| -v).collect()
    }

    /// `eps~ = eps^2 - y_Omega^T y_Omega`; may be negative.
    pub fn eps_tilde(&self) -> f64 {
        let y = self.y_omega();
        self.epsilon * self.epsilon - y.iter().map(|v| v * v).sum::<f64>()
    }

    /// `u^T Q u + 2 q^T u - eps~`; nonpositive exactly on the feasible side.
    pub fn quadratic_value(&self, u: &[f64]) -> f64 {
        let qu = self.quad_apply(u);
        let q = self.linear_term();
        dot(u, &qu) + 2.0 * dot(&q, u) - self.eps_tilde()
    }

    /// `||A_Omega u - y_Omega||`.
    pub fn fit_residual_norm(&self, u: &DMatrix<f64>) -> f64 {
        let pred = self.predictions(u);
        self.pattern
            .omega()
            .iter()
            .map(|&i| {
                let (m, p) = self.pattern.split(i);
                (pred[(m, p)] - self.targets[(m, p)]).powi(2)
            })
            .sum::<f64>()
            .sqrt()
    }

    /// `max(0, max_j (P u - c)_j)`.
    pub fn ineq_violation(&self, u: &DMatrix<f64>) -> f64 {
        let pred = self.predictions(u);
        self.pattern
            .omega_c()
            .iter()
            .map(|&i| {
                let (m, p) = self.pattern.split(i);
                pred[(m, p)] - self.bounds[(m, p)]
            })
            .fold(0.0, f64::max)
    }

    pub fn contains(&self, u: &DMatrix<f64>, slack: f64) -> bool {
        self.fit_residual_norm(u) <= self.epsilon + slack && self.ineq_violation(u) <= slack
    }

    /// Explicit `(I_M (x) X)` restricted to `cols`, as an `MN x |cols|` matrix.
    /// Intended for tiny instances only.
    pub fn materialize_columns(&self, cols: &[usize]) -> DMatrix<f64> {
        let n = self.inputs();
        let mut out = DMatrix::zeros(self.n_vars(), cols.len());
        for (k, &i) in cols.iter().enumerate() {
            let (m, p) = self.pattern.split(i);
            for r in 0..n {
                out[(m * n + r, k)] = self.x[(r, p)];
            }
        }
        out
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One decoupled output neuron: `w` against row `y` of the layer target.
#[derive(Debug, Clone)]
pub struct NeuronSubproblem {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub v: DVector<f64>,
    pub epsilon: f64,
    pub omega_row: Vec<usize>,
}

pub fn build_neuron_subproblem(
    x: &DMatrix<f64>,
    y_row: &DVector<f64>,
    v_row: &DVector<f64>,
    epsilon: f64,
) -> Result<NeuronSubproblem> {
    if y_row.len() != x.ncols() || v_row.len() != x.ncols() {
        return Err(Error::Dimension(format!(
            "X has {} samples, y has {}, v has {}",
            x.ncols(),
            y_row.len(),
            v_row.len()
        )));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon}")));
    }
    if let Some(p) = y_row.iter().position(|v| *v < 0.0) {
        return Err(Error::NegativeTarget { row: 0, col: p, value: y_row[p] });
    }
    let omega_row = (0..y_row.len()).filter(|&p| y_row[p] > 0.0).collect();
    Ok(NeuronSubproblem {
        x: x.clone(),
        y: y_row.clone(),
        v: v_row.clone(),
        epsilon,
        omega_row,
    })
}

impl NeuronSubproblem {
    pub fn to_qcqp(&self) -> QcqpData {
        let spec = LayerConstraintSpec {
            x: self.x.clone(),
            y: DMatrix::from_row_slice(1, self.y.len(), self.y.as_slice()),
            v: DMatrix::from_row_slice(1, self.v.len(), self.v.as_slice()),
            epsilon: self.epsilon,
            activation_threshold: 0.0,
        };
        build_layer_qcqp(&spec).expect("validated at construction")
    }
}

/// Nonnegative split `u~ = [u+; -u-]` of a [`QcqpData`].
#[derive(Debug, Clone, Copy)]
pub struct SplitQcqp<'a> {
    base: &'a QcqpData,
}

pub fn split_nonneg(q: &QcqpData) -> SplitQcqp<'_> {
    SplitQcqp { base: q }
}

impl<'a> SplitQcqp<'a> {
    pub fn base(&self) -> &'a QcqpData {
        self.base
    }

    pub fn n_vars(&self) -> usize {
        2 * self.base.n_vars()
    }

    /// `u~ = [max(u,0); -min(u,0)]`.
    pub fn lift(u: &[f64]) -> Vec<f64> {
        let pos = u.iter().map(|v| v.max(0.0));
        let neg = u.iter().map(|v| (-v).max(0.0));
        pos.chain(neg).collect()
    }

    /// `u = [I, -I] u~`.
    pub fn collapse(ut: &[f64]) -> Vec<f64> {
        let n = ut.len() / 2;
        (0..n).map(|i| ut[i] - ut[n + i]).collect()
    }

    pub fn objective(ut: &[f64]) -> f64 {
        ut.iter().sum()
    }

    /// `Q~ u~` with `Q~ = [[1,-1],[-1,1]] (x) Q`.
    pub fn quad_apply(&self, ut: &[f64]) -> Vec<f64> {
        let qu = self.base.quad_apply(&Self::collapse(ut));
        qu.iter().copied().chain(qu.iter().map(|v| -v)).collect()
    }

    pub fn linear_term(&self) -> Vec<f64> {
        let q = self.base.linear_term();
        q.iter().copied().chain(q.iter().map(|v| -v)).collect()
    }

    pub fn eps_tilde(&self) -> f64 {
        self.base.eps_tilde()
    }

    /// `P~ u~ = [P, -P] u~`.
    pub fn ineq_apply(&self, ut: &[f64]) -> Vec<f64> {
        self.base.ineq_apply(&Self::collapse(ut))
    }

    pub fn c(&self) -> Vec<f64> {
        self.base.c()
    }

    pub fn quadratic_value(&self, ut: &[f64]) -> f64 {
        let qu = self.quad_apply(ut);
        dot(ut, &qu) + 2.0 * dot(&self.linear_term(), ut) - self.eps_tilde()
    }
}
