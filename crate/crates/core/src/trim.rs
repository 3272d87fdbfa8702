//! Layer-wise retraining pipelines and the discrepancy bounds they guarantee.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::{build_layer_qcqp, LayerConstraintSpec, QcqpData};
use crate::error::{Error, Result};
use crate::model::{
    forward, link_normalize, relative_discrepancy, NetworkModel, ScaleLedger, SignalStack, WeightMatrix,
    DEFAULT_ZERO_TOL,
};
use crate::solver::{solve_qcqp, SolveStatus, SolverOptions, SolverReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrimMode {
    Parallel,
    Cascade,
}

/// How each layer's output neurons are grouped into independent programs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterSpec {
    WholeLayer,
    Singleton,
    /// `k` contiguous groups of near-equal size.
    Count(usize),
    Explicit(Vec<Vec<usize>>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrimConfig {
    pub mode: TrimMode,
    pub epsilon_rel: f64,
    /// Absolute per-layer tolerances overriding `epsilon_rel` (cascade uses the
    /// first entry only; later tolerances follow from `gamma`).
    pub layer_epsilons: Option<Vec<f64>>,
    pub gamma: f64,
    pub kappa: f64,
    pub clusters: ClusterSpec,
    pub solver: SolverOptions,
    pub link_normalize: bool,
    pub zero_tol: f64,
    /// Worker threads for independent solves; `None` uses the global pool.
    pub jobs: Option<usize>,
}

impl Default for TrimConfig {
    fn default() -> Self {
        Self {
            mode: TrimMode::Parallel,
            epsilon_rel: 0.01,
            layer_epsilons: None,
            gamma: 1.1,
            kappa: 1.0,
            clusters: ClusterSpec::WholeLayer,
            solver: SolverOptions::default(),
            link_normalize: false,
            zero_tol: DEFAULT_ZERO_TOL,
            jobs: None,
        }
    }
}

impl TrimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_rel >= 0.0) || !self.epsilon_rel.is_finite() {
            return Err(Error::InvalidArgument(format!("epsilon_rel {}", self.epsilon_rel)));
        }
        if let Some(e) = &self.layer_epsilons {
            if e.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidArgument("layer tolerances must be nonnegative".into()));
            }
        }
        if !(self.gamma >= 1.0) || !self.gamma.is_finite() {
            return Err(Error::InvalidArgument(format!("gamma must be >= 1, got {}", self.gamma)));
        }
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(Error::InvalidArgument(format!("kappa must lie in (0, 1], got {}", self.kappa)));
        }
        if !(self.zero_tol >= 0.0) {
            return Err(Error::InvalidArgument(format!("zero_tol {}", self.zero_tol)));
        }
        if self.jobs == Some(0) {
            return Err(Error::InvalidArgument("jobs must be at least 1".into()));
        }
        self.solver.validate()
    }
}

/// Disjoint groups of output neurons covering `0..outputs`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterPartition {
    clusters: Vec<Vec<usize>>,
    outputs: usize,
}

impl ClusterPartition {
    pub fn new(clusters: Vec<Vec<usize>>, outputs: usize) -> Result<Self> {
        let mut seen = vec![false; outputs];
        for c in &clusters {
            if c.is_empty() {
                return Err(Error::InvalidArgument("empty cluster".into()));
            }
            for &m in c {
                if m >= outputs || seen[m] {
                    return Err(Error::InvalidArgument(format!(
                        "neuron {m} is out of range or listed twice"
                    )));
                }
                seen[m] = true;
            }
        }
        if let Some(m) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!("neuron {m} is not in any cluster")));
        }
        Ok(Self { clusters, outputs })
    }

    pub fn whole(outputs: usize) -> Self {
        Self {
            clusters: vec![(0..outputs).collect()],
            outputs,
        }
    }

    pub fn singletons(outputs: usize) -> Self {
        Self {
            clusters: (0..outputs).map(|m| vec![m]).collect(),
            outputs,
        }
    }

    pub fn contiguous(outputs: usize, k: usize) -> Result<Self> {
        if k == 0 || k > outputs {
            return Err(Error::InvalidArgument(format!(
                "cannot split {outputs} neurons into {k} clusters"
            )));
        }
        let clusters = (0..k)
            .map(|i| (i * outputs / k..(i + 1) * outputs / k).collect())
            .collect();
        Ok(Self { clusters, outputs })
    }

    pub fn from_spec(spec: &ClusterSpec, outputs: usize) -> Result<Self> {
        match spec {
            ClusterSpec::WholeLayer => Ok(Self::whole(outputs)),
            ClusterSpec::Singleton => Ok(Self::singletons(outputs)),
            ClusterSpec::Count(k) => Self::contiguous(outputs, (*k).min(outputs)),
            ClusterSpec::Explicit(c) => Self::new(c.clone(), outputs),
        }
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    /// `eps_k = eps * sqrt(|C_k| / M)`, so that `sum_k eps_k^2 = eps^2`.
    pub fn epsilons(&self, epsilon: f64) -> Vec<f64> {
        let m = self.outputs as f64;
        self.clusters
            .iter()
            .map(|c| epsilon * (c.len() as f64 / m).sqrt())
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerTrim {
    /// 1-based layer index.
    pub layer: usize,
    pub epsilon: f64,
    pub nnz_before: usize,
    pub nnz_after: usize,
    /// Aggregate over the layer's cluster solves.
    pub report: SolverReport,
    /// `||Yhat(l) - Y(l)||_F` through the pruned network.
    pub discrepancy: f64,
    /// Whether hard thresholding at `zero_tol` was kept.
    pub thresholded: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundEntry {
    pub layer: usize,
    /// Measured `||Yhat(l) - Y(l)||_F` in the link-normalized domain.
    pub measured: f64,
    /// Analytic upper bound in the same domain.
    pub claimed: f64,
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundLedger {
    pub entries: Vec<BoundEntry>,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct TrimResult {
    pub mode: TrimMode,
    pub pruned: NetworkModel,
    pub layers: Vec<LayerTrim>,
    /// `||Z - Zhat||_F / ||Z||_F` at the network output.
    pub relative_discrepancy: f64,
    pub bounds: BoundLedger,
    /// Ledger used when the run was link-normalized.
    pub ledger: Option<ScaleLedger>,
    pub gamma: f64,
    pub kappa: f64,
    /// Set when `gamma == 1`, which the feasibility argument allows but the
    /// strict-inflation form of the cascade bound does not.
    pub gamma_at_one: bool,
    pub converged: bool,
}

fn with_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn aggregate(reports: &[SolverReport]) -> SolverReport {
    let status = if reports.iter().any(|r| r.status == SolveStatus::Infeasible) {
        SolveStatus::Infeasible
    } else if reports.iter().all(|r| r.status == SolveStatus::Converged) {
        SolveStatus::Converged
    } else {
        SolveStatus::MaxIterations
    };
    SolverReport {
        objective: reports.iter().map(|r| r.objective).sum(),
        fit_residual: reports.iter().map(|r| r.fit_residual).fold(0.0, f64::max),
        ineq_violation: reports.iter().map(|r| r.ineq_violation).fold(0.0, f64::max),
        stationarity: reports.iter().map(|r| r.stationarity).fold(0.0, f64::max),
        complementarity: reports.iter().map(|r| r.complementarity).fold(0.0, f64::max),
        iterations: reports.iter().map(|r| r.iterations).sum(),
        converged: reports.iter().all(|r| r.converged),
        status,
        polished: reports.iter().all(|r| r.polished),
        interior_point: reports.iter().any(|r| r.interior_point),
        rho: reports.iter().map(|r| r.rho).fold(0.0, f64::max),
    }
}

/// Solves each cluster of `q` with its own tolerance and stitches the columns.
fn solve_partitioned(
    q: &QcqpData,
    partition: &ClusterPartition,
    epsilons: &[f64],
    opts: &SolverOptions,
) -> Result<(DMatrix<f64>, SolverReport)> {
    if partition.outputs() != q.outputs() {
        return Err(Error::Dimension(format!(
            "partition covers {} neurons, layer has {}",
            partition.outputs(),
            q.outputs()
        )));
    }
    if partition.clusters().len() == 1 {
        let sol = solve_qcqp(&q.select_outputs(&partition.clusters()[0], epsilons[0]), opts)?;
        let mut u = DMatrix::zeros(q.inputs(), q.outputs());
        for (k, &m) in partition.clusters()[0].iter().enumerate() {
            u.set_column(m, &sol.u.column(k));
        }
        return Ok((u, sol.report));
    }
    let sols = partition
        .clusters()
        .par_iter()
        .zip(epsilons.par_iter())
        .map(|(c, &eps)| solve_qcqp(&q.select_outputs(c, eps), opts))
        .collect::<Result<Vec<_>>>()?;
    let mut u = DMatrix::zeros(q.inputs(), q.outputs());
    for (c, sol) in partition.clusters().iter().zip(&sols) {
        for (k, &m) in c.iter().enumerate() {
            u.set_column(m, &sol.u.column(k));
        }
    }
    let reports: Vec<SolverReport> = sols.into_iter().map(|s| s.report).collect();
    Ok((u, aggregate(&reports)))
}

/// Retrains one layer given stitched per-cluster tolerances, then hard-thresholds.
fn retrain(
    q: &QcqpData,
    partition: &ClusterPartition,
    epsilons: &[f64],
    config: &TrimConfig,
) -> Result<(DMatrix<f64>, SolverReport, bool)> {
    let (u, report) = solve_partitioned(q, partition, epsilons, &config.solver)?;
    let (u, thresholded) = threshold(q, partition, epsilons, u, config);
    Ok((u, report, thresholded))
}

/// Zeroes entries below `zero_tol` unless that pushes any cluster outside its set.
fn threshold(
    q: &QcqpData,
    partition: &ClusterPartition,
    epsilons: &[f64],
    u: DMatrix<f64>,
    config: &TrimConfig,
) -> (DMatrix<f64>, bool) {
    let cut = u.map(|v| if v.abs() <= config.zero_tol { 0.0 } else { v });
    if cut == u {
        return (u, true);
    }
    let slack = config.solver.abs_tol;
    let ok = partition.clusters().iter().zip(epsilons).all(|(c, &eps)| {
        let sub = q.select_outputs(c, eps);
        let before = cut.select_columns(c);
        let orig = u.select_columns(c);
        let fit_ok = sub.fit_residual_norm(&before) <= eps + slack
            || sub.fit_residual_norm(&before) <= sub.fit_residual_norm(&orig);
        let ineq_ok = sub.ineq_violation(&before) <= slack
            || sub.ineq_violation(&before) <= sub.ineq_violation(&orig);
        fit_ok && ineq_ok
    });
    if ok { (cut, true) } else { (u, false) }
}

fn frob_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm()
}

/// Last-layer tolerance rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LastLayerTolerance {
    /// `||U^T Y(L-1) - Y(L)||_F <= epsilon` against original signals.
    Parallel { epsilon: f64 },
    /// `eps_L^2 = gamma ||W_L^T Yhat(L-1) - Y(L)||_F^2`, tightened to `kappa * eps_L`.
    Cascade { gamma: f64, kappa: f64 },
}

/// Retrains a linear output layer. Returns the weights, the solver report and
/// the tolerance actually imposed.
pub fn retrain_last_layer(
    y_prev: &DMatrix<f64>,
    y_last: &DMatrix<f64>,
    w_last: &WeightMatrix,
    tolerance: LastLayerTolerance,
    opts: &SolverOptions,
) -> Result<(WeightMatrix, SolverReport, f64)> {
    let config = TrimConfig {
        solver: opts.clone(),
        ..TrimConfig::default()
    };
    let (u, report, _, eps) = retrain_linear(y_prev, y_last, w_last, tolerance, &ClusterSpec::WholeLayer, &config)?;
    Ok((WeightMatrix::new(u)?, report, eps))
}

fn retrain_linear(
    y_prev: &DMatrix<f64>,
    y_last: &DMatrix<f64>,
    w_last: &WeightMatrix,
    tolerance: LastLayerTolerance,
    clusters: &ClusterSpec,
    config: &TrimConfig,
) -> Result<(DMatrix<f64>, SolverReport, bool, f64)> {
    if w_last.nrows() != y_prev.nrows() || w_last.ncols() != y_last.nrows() {
        return Err(Error::Dimension("last-layer weights do not match the signals".into()));
    }
    let partition = ClusterPartition::from_spec(clusters, y_last.nrows())?;
    let (eps, epsilons) = match tolerance {
        LastLayerTolerance::Parallel { epsilon } => (epsilon, partition.epsilons(epsilon)),
        LastLayerTolerance::Cascade { gamma, kappa } => {
            let resid = w_last.tr_mul(y_prev) - y_last;
            let per_cluster: Vec<f64> = partition
                .clusters()
                .iter()
                .map(|c| kappa * (gamma * resid.select_rows(c).norm_squared()).sqrt())
                .collect();
            let eps = kappa * gamma.sqrt() * resid.norm();
            (eps, per_cluster)
        }
    };
    let q = QcqpData::linear_fit(y_prev.clone(), y_last.clone(), eps)?;
    // the least-squares fit is the best any weights can do
    let svd = y_prev.transpose().svd(true, true);
    for (c, &e) in partition.clusters().iter().zip(&epsilons) {
        let target = y_last.select_rows(c).transpose();
        let ls = svd
            .solve(&target, 1e-12 * svd.singular_values.max())
            .map_err(|e| Error::InvalidArgument(e.into()))?;
        let floor = (y_prev.tr_mul(&ls) - &target).norm();
        if floor > e + config.solver.abs_tol {
            return Err(Error::Infeasible(format!(
                "last layer cannot reach tolerance {e:.3e} (least-squares floor {floor:.3e}); retry with a larger kappa"
            )));
        }
    }
    let (u, report, thr) = retrain(&q, &partition, &epsilons, config)?;
    Ok((u, report, thr, eps))
}

fn layer_epsilon(config: &TrimConfig, l: usize, y_out: &DMatrix<f64>) -> f64 {
    match &config.layer_epsilons {
        Some(e) => e[l],
        None => config.epsilon_rel * y_out.norm(),
    }
}

fn check_architecture(net: &NetworkModel) -> Result<()> {
    // only the final layer may be linear; the model type enforces this already
    debug_assert!((0..net.num_layers().saturating_sub(1)).all(|l| net.is_relu_layer(l)));
    Ok(())
}

struct Prepared {
    work: NetworkModel,
    ledger: Option<ScaleLedger>,
    signals: SignalStack,
}

fn prepare(net: &NetworkModel, x: &DMatrix<f64>, config: &TrimConfig) -> Result<Prepared> {
    config.validate()?;
    check_architecture(net)?;
    if let Some(e) = &config.layer_epsilons {
        if e.len() != net.num_layers() {
            return Err(Error::InvalidArgument(format!(
                "{} layer tolerances for {} layers",
                e.len(),
                net.num_layers()
            )));
        }
    }
    let (work, ledger) = if config.link_normalize {
        let (n, l) = link_normalize(net)?;
        (n, Some(l))
    } else {
        (net.clone(), None)
    };
    let signals = forward(&work, x)?;
    Ok(Prepared { work, ledger, signals })
}

fn finish(
    net: &NetworkModel,
    x: &DMatrix<f64>,
    config: &TrimConfig,
    prep: Prepared,
    weights: Vec<DMatrix<f64>>,
    mut layers: Vec<LayerTrim>,
) -> Result<TrimResult> {
    let pruned_work = prep
        .work
        .with_layers(weights.into_iter().map(WeightMatrix::new).collect::<Result<Vec<_>>>()?)?;
    let pruned = match &prep.ledger {
        Some(l) => l.denormalize(&pruned_work)?,
        None => pruned_work,
    };
    let before = forward(net, x)?;
    let after = forward(&pruned, x)?;
    for lt in layers.iter_mut() {
        lt.discrepancy = frob_diff(after.level(lt.layer), before.level(lt.layer));
        if let Some(l) = &prep.ledger {
            // tolerances were computed on normalized signals
            lt.epsilon *= l.cumulative(lt.layer);
        }
    }
    let relative_discrepancy = relative_discrepancy(before.output(), after.output())?;
    let converged = layers.iter().all(|l| l.report.converged);
    let mut result = TrimResult {
        mode: config.mode,
        pruned,
        layers,
        relative_discrepancy,
        bounds: BoundLedger {
            entries: Vec::new(),
            pass: true,
        },
        ledger: prep.ledger,
        gamma: config.gamma,
        kappa: config.kappa,
        gamma_at_one: config.mode == TrimMode::Cascade && config.gamma == 1.0,
        converged,
    };
    result.bounds = verify_discrepancy_bounds(&result, net, x, config.solver.feasibility_slack)?;
    Ok(result)
}

/// Retrains every layer independently against the original signals.
pub fn parallel_trim(net: &NetworkModel, x: &DMatrix<f64>, config: &TrimConfig) -> Result<TrimResult> {
    let prep = prepare(net, x, config)?;
    let levels = prep.signals.levels();
    let work = &prep.work;
    let solved = with_pool(config.jobs, || {
        (0..work.num_layers())
            .into_par_iter()
            .map(|l| -> Result<(DMatrix<f64>, LayerTrim)> {
                let y_in = &levels[l];
                let y_out = &levels[l + 1];
                let eps = layer_epsilon(config, l, y_out);
                let w = work.layer(l);
                let (u, report, thresholded) = if work.is_relu_layer(l) {
                    let q = build_layer_qcqp(&LayerConstraintSpec::parallel(y_in.clone(), y_out.clone(), eps)?)?;
                    let partition = ClusterPartition::from_spec(&config.clusters, q.outputs())?;
                    retrain(&q, &partition, &partition.epsilons(eps), config)?
                } else {
                    let (u, r, t, _) = retrain_linear(
                        y_in,
                        y_out,
                        w,
                        LastLayerTolerance::Parallel { epsilon: eps },
                        &config.clusters,
                        config,
                    )?;
                    (u, r, t)
                };
                let lt = LayerTrim {
                    layer: l + 1,
                    epsilon: eps,
                    nnz_before: w.nnz(config.zero_tol),
                    nnz_after: u.iter().filter(|v| v.abs() > config.zero_tol).count(),
                    report,
                    discrepancy: 0.0,
                    thresholded,
                };
                Ok((u, lt))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let (weights, layers): (Vec<_>, Vec<_>) = solved.into_iter().unzip();
    finish(net, x, config, prep, weights, layers)
}

/// Retrains layers in order, each against the already-retrained signals of the
/// previous layer with slack `V = W^T Yhat` and an inflated tolerance.
pub fn cascade_trim(net: &NetworkModel, x: &DMatrix<f64>, config: &TrimConfig) -> Result<TrimResult> {
    let prep = prepare(net, x, config)?;
    let levels = prep.signals.levels().to_vec();
    let work = prep.work.clone();
    let slack = config.solver.abs_tol;
    let (weights, layers) = with_pool(config.jobs, || -> Result<(Vec<DMatrix<f64>>, Vec<LayerTrim>)> {
        let mut weights = Vec::with_capacity(work.num_layers());
        let mut layers = Vec::with_capacity(work.num_layers());
        let mut y_hat = levels[0].clone();
        for l in 0..work.num_layers() {
            let w = work.layer(l);
            let y_out = &levels[l + 1];
            let (u, report, thresholded, eps) = if !work.is_relu_layer(l) {
                retrain_linear(
                    &y_hat,
                    y_out,
                    w,
                    LastLayerTolerance::Cascade {
                        gamma: config.gamma,
                        kappa: config.kappa,
                    },
                    &config.clusters,
                    config,
                )?
            } else if l == 0 {
                let eps = layer_epsilon(config, 0, y_out);
                let q = build_layer_qcqp(&LayerConstraintSpec::parallel(y_hat.clone(), y_out.clone(), eps)?)?;
                let partition = ClusterPartition::from_spec(&config.clusters, q.outputs())?;
                let (u, r, t) = retrain(&q, &partition, &partition.epsilons(eps), config)?;
                (u, r, t, eps)
            } else {
                let pre = w.tr_mul(&y_hat);
                let mut sq = vec![0.0; y_out.nrows()];
                for p in 0..y_out.ncols() {
                    for m in 0..y_out.nrows() {
                        if y_out[(m, p)] > 0.0 {
                            sq[m] += (pre[(m, p)] - y_out[(m, p)]).powi(2);
                        }
                    }
                }
                let eps = (config.gamma * sq.iter().sum::<f64>()).sqrt();
                let spec = LayerConstraintSpec::new(y_hat.clone(), y_out.clone(), pre, eps)?;
                let q = build_layer_qcqp(&spec)?;
                let partition = ClusterPartition::from_spec(&config.clusters, q.outputs())?;
                // each cluster inflates its own share of the residual, which keeps W feasible
                let epsilons: Vec<f64> = partition
                    .clusters()
                    .iter()
                    .map(|c| (config.gamma * c.iter().map(|&m| sq[m]).sum::<f64>()).sqrt())
                    .collect();
                for (c, &e) in partition.clusters().iter().zip(&epsilons) {
                    let sub = q.select_outputs(c, e);
                    let wc = w.select_columns(c);
                    let excess = (sub.fit_residual_norm(&wc) - e).max(sub.ineq_violation(&wc));
                    if excess > slack * (1.0 + e) {
                        return Err(Error::FeasibilityAssertion { layer: l + 1, excess });
                    }
                }
                let (u, r, t) = retrain(&q, &partition, &epsilons, config)?;
                (u, r, t, eps)
            };
            let z = u.tr_mul(&y_hat);
            y_hat = if work.is_relu_layer(l) { z.map(|v| v.max(0.0)) } else { z };
            layers.push(LayerTrim {
                layer: l + 1,
                epsilon: eps,
                nnz_before: w.nnz(config.zero_tol),
                nnz_after: u.iter().filter(|v| v.abs() > config.zero_tol).count(),
                report,
                discrepancy: 0.0,
                thresholded,
            });
            weights.push(u);
        }
        Ok((weights, layers))
    })??;
    finish(net, x, config, prep, weights, layers)
}

pub fn trim(net: &NetworkModel, x: &DMatrix<f64>, config: &TrimConfig) -> Result<TrimResult> {
    match config.mode {
        TrimMode::Parallel => parallel_trim(net, x, config),
        TrimMode::Cascade => cascade_trim(net, x, config),
    }
}

/// Retrains one ReLU layer cluster by cluster with `eps_k = eps sqrt(|C_k|/M)`
/// and zero slack.
pub fn pcn_partition_trim(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    partition: &ClusterPartition,
    epsilon: f64,
    opts: &SolverOptions,
) -> Result<(WeightMatrix, SolverReport)> {
    let q = build_layer_qcqp(&LayerConstraintSpec::parallel(x.clone(), y.clone(), epsilon)?)?;
    let (u, report) = solve_partitioned(&q, partition, &partition.epsilons(epsilon), opts)?;
    Ok((WeightMatrix::new(u)?, report))
}

/// Checks measured layer discrepancies against the analytic bounds.
///
/// Everything is mapped into the link-normalized domain of `net_before`, where
/// the bounds hold: level `l` and its tolerance are divided by the cumulative
/// mass of layers `1..=l`.
pub fn verify_discrepancy_bounds(
    result: &TrimResult,
    net_before: &NetworkModel,
    x: &DMatrix<f64>,
    slack: f64,
) -> Result<BoundLedger> {
    let epsilons: Vec<f64> = result.layers.iter().map(|lt| lt.epsilon).collect();
    let spec = BoundSpec {
        mode: result.mode,
        gamma: result.gamma,
        kappa: result.kappa,
        epsilons: &epsilons,
    };
    check_bounds(&spec, net_before, &result.pruned, x, slack)
}

/// What a finished run claims: mode, inflation parameters and the per-layer
/// tolerances it used (original scale).
#[derive(Debug, Clone, Copy)]
pub struct BoundSpec<'a> {
    pub mode: TrimMode,
    pub gamma: f64,
    pub kappa: f64,
    pub epsilons: &'a [f64],
}

/// Bound ledger for an arbitrary pruned network, e.g. one loaded from disk.
pub fn check_bounds(
    spec: &BoundSpec<'_>,
    net_before: &NetworkModel,
    pruned: &NetworkModel,
    x: &DMatrix<f64>,
    slack: f64,
) -> Result<BoundLedger> {
    if spec.epsilons.len() != net_before.num_layers() || pruned.widths() != net_before.widths() {
        return Err(Error::Dimension(format!(
            "{} tolerances, widths {:?} vs {:?}",
            spec.epsilons.len(),
            net_before.widths(),
            pruned.widths()
        )));
    }
    let (_, ledger) = link_normalize(net_before)?;
    let before = forward(net_before, x)?;
    let after = forward(pruned, x)?;
    let mut entries = Vec::with_capacity(spec.epsilons.len());
    let mut sum = 0.0;
    let mut eps1 = 0.0;
    let mut inflation = 1.0;
    for (i, &eps) in spec.epsilons.iter().enumerate() {
        let l = i + 1;
        let pi = ledger.cumulative(l);
        let eps_n = eps / pi;
        let linear = !net_before.is_relu_layer(l - 1);
        let claimed = match spec.mode {
            TrimMode::Parallel => {
                sum += eps_n;
                sum
            }
            TrimMode::Cascade => {
                if l == 1 {
                    eps1 = eps_n;
                } else {
                    inflation *= spec.gamma;
                }
                let chain = eps1 * inflation.sqrt();
                if linear { spec.kappa * chain } else { chain }
            }
        };
        let measured = frob_diff(after.level(l), before.level(l)) / pi;
        let allowed = claimed + slack * l as f64;
        entries.push(BoundEntry {
            layer: l,
            measured,
            claimed,
            margin: claimed - measured,
            pass: measured <= allowed,
        });
    }
    let pass = entries.iter().all(|e| e.pass);
    Ok(BoundLedger { entries, pass })
}
