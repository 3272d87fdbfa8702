//! Planted sparse-recovery experiments for a single ReLU unit.
//!
//! Observations are `y = relu(X^T w*)` with Gaussian `X` and an `s`-sparse
//! `w*`. Recovery solves the `eps = 0` program (fit on the active samples,
//! `X^T w <= 0` elsewhere), and a least-squares dual vector certifies
//! uniqueness when it exists.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::build_neuron_subproblem;
use crate::solver::{solve_neuron, SolverOptions, SolverReport};
use crate::{Error, Result};

/// Smallest magnitude of a planted nonzero.
pub const MIN_PLANTED_MAGNITUDE: f64 = 0.1;

/// Relative recovery tolerance: success when `||w - w*||_inf <= tol * max(1, ||w*||_inf)`.
pub const RECOVERY_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedInstance {
    pub n: usize,
    pub p: usize,
    pub s: usize,
    /// `N x P`, one sample per column.
    pub x: DMatrix<f64>,
    pub w_star: DVector<f64>,
    /// Support of `w*`, increasing.
    pub support: Vec<usize>,
    pub y: DVector<f64>,
    /// Samples with `y_p > 0`, increasing.
    pub omega: Vec<usize>,
    /// Seed that produced the instance after any regeneration.
    pub seed: u64,
    /// Number of draws discarded because no sample was active.
    pub regenerations: usize,
}

impl PlantedInstance {
    /// Builds an instance from explicit data; `omega` may come out empty here.
    pub fn from_parts(x: DMatrix<f64>, w_star: DVector<f64>, seed: u64) -> Result<Self> {
        if x.nrows() != w_star.len() {
            return Err(Error::Dimension(format!(
                "X has {} rows but w* has length {}",
                x.nrows(),
                w_star.len()
            )));
        }
        if x.iter().chain(w_star.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("planted instance"));
        }
        let y = x.tr_mul(&w_star).map(|v| v.max(0.0));
        let omega = (0..y.len()).filter(|&p| y[p] > 0.0).collect();
        let support: Vec<usize> = (0..w_star.len()).filter(|&i| w_star[i] != 0.0).collect();
        Ok(Self {
            n: x.nrows(),
            p: x.ncols(),
            s: support.len(),
            x,
            w_star,
            support,
            y,
            omega,
            seed,
            regenerations: 0,
        })
    }

    pub fn off_support(&self) -> Vec<usize> {
        (0..self.n).filter(|i| self.support.binary_search(i).is_err()).collect()
    }

    /// `||w - w*||_inf`.
    pub fn error(&self, w: &DVector<f64>) -> f64 {
        (w - &self.w_star).amax()
    }

    pub fn is_recovered(&self, w: &DVector<f64>) -> bool {
        self.error(w) <= RECOVERY_TOL * self.w_star.amax().max(1.0)
    }
}

fn draw(n: usize, s: usize, p: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut w = DVector::zeros(n);
    let mut idx = sample(&mut rng, n, s).into_vec();
    idx.sort_unstable();
    for i in idx {
        w[i] = loop {
            let v: f64 = rng.sample(StandardNormal);
            if v.abs() >= MIN_PLANTED_MAGNITUDE {
                break v;
            }
        };
    }
    (x, w)
}

/// Draws a planted instance; a draw with no active sample is discarded and the
/// seed incremented.
pub fn generate_planted(n: usize, s: usize, p: usize, seed: u64) -> Result<PlantedInstance> {
    if s == 0 || s > n {
        return Err(Error::InvalidArgument(format!("sparsity {s} must lie in 1..={n}")));
    }
    if p == 0 {
        return Err(Error::InvalidArgument("at least one sample is required".into()));
    }
    let mut cur = seed;
    let mut regenerations = 0;
    loop {
        let (x, w) = draw(n, s, p, cur);
        let mut inst = PlantedInstance::from_parts(x, w, cur)?;
        if !inst.omega.is_empty() {
            inst.regenerations = regenerations;
            return Ok(inst);
        }
        regenerations += 1;
        cur = cur.wrapping_add(1);
    }
}

/// Solves `min ||w||_1` s.t. `X_{:,Omega}^T w = y_Omega`, `X_{:,Omega^c}^T w <= 0`.
pub fn exact_recover(inst: &PlantedInstance, opts: &SolverOptions) -> Result<(DVector<f64>, SolverReport)> {
    let v = DVector::zeros(inst.p);
    let sub = build_neuron_subproblem(&inst.x, &inst.y, &v, 0.0)?;
    solve_neuron(&sub, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    /// Dual vector on the active samples (zero elsewhere).
    pub xi_omega: Vec<f64>,
    /// `X_{:,Omega} xi_Omega`: equals `sign(w*)` on the support when full rank.
    pub lambda: Vec<f64>,
    /// Smallest eigenvalue of `X_{Gamma,Omega} X_{Gamma,Omega}^T`.
    pub min_eigenvalue: f64,
    /// `||X_{Gamma^c,Omega} xi_Omega||_inf`; zero when the support is everything.
    pub off_support_inf_norm: f64,
    pub full_rank: bool,
    pub certificate_holds: bool,
}

/// Least-squares dual certificate for uniqueness of `w*` as the recovery optimum.
pub fn build_certificate(inst: &PlantedInstance) -> Result<CertificateReport> {
    if inst.support.is_empty() || inst.omega.is_empty() {
        return Err(Error::InvalidArgument("certificate needs a nonempty support and active set".into()));
    }
    let x_omega = inst.x.select_columns(&inst.omega);
    let x_g = x_omega.select_rows(&inst.support);
    let gram = &x_g * x_g.transpose();
    let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
    let min_eigenvalue = eig.min();
    let max_eigenvalue = eig.max().max(0.0);
    let full_rank = x_g.nrows() <= x_g.ncols() && min_eigenvalue > 1e-12 * max_eigenvalue.max(1.0);

    let sign = DVector::from_iterator(inst.s, inst.support.iter().map(|&i| inst.w_star[i].signum()));
    let xi = if full_rank {
        gram.cholesky()
            .map(|c| x_g.tr_mul(&c.solve(&sign)))
            .unwrap_or_else(|| DVector::zeros(inst.omega.len()))
    } else {
        DVector::zeros(inst.omega.len())
    };
    let lambda = &x_omega * &xi;
    let off = inst.off_support();
    let off_support_inf_norm = off.iter().fold(0.0f64, |m, &i| m.max(lambda[i].abs()));
    let full_rank = full_rank && xi.iter().all(|v| v.is_finite());
    Ok(CertificateReport {
        xi_omega: xi.iter().copied().collect(),
        lambda: lambda.iter().copied().collect(),
        min_eigenvalue,
        off_support_inf_norm,
        full_rank,
        certificate_holds: full_rank && off_support_inf_norm < 1.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LogBase {
    #[default]
    Natural,
    Ten,
}

impl LogBase {
    pub fn log(self, v: f64) -> f64 {
        match self {
            LogBase::Natural => v.ln(),
            LogBase::Ten => v.log10(),
        }
    }
}

/// `ceil((15 s + 6) mu log N)`.
pub fn sample_count(n: usize, s: usize, mu: f64, base: LogBase) -> usize {
    ((15 * s + 6) as f64 * mu * base.log(n as f64)).ceil().max(0.0) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub seed: u64,
    pub error: f64,
    pub success: bool,
    pub certificate_holds: bool,
    pub converged: bool,
    pub regenerations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub n: usize,
    pub s: usize,
    /// `None` when the sample count was given directly.
    pub mu: Option<f64>,
    pub p: usize,
    pub log_base: LogBase,
    pub trials: usize,
    pub successes: usize,
    pub mean_error: f64,
    pub certificate_holds: usize,
    /// Trials where the certificate held but recovery failed.
    pub counterexamples: usize,
    pub regenerations: usize,
    pub outcomes: Vec<TrialOutcome>,
    /// Left out of serialized reports so reruns compare byte for byte.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl ExperimentResult {
    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.trials as f64
    }
}

/// Per-trial seed, decorrelated from neighbouring base seeds.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs `trials` independent generate/recover/certify rounds at a fixed sample count.
pub fn recovery_trials(
    n: usize,
    s: usize,
    p: usize,
    trials: usize,
    seed: u64,
    opts: &SolverOptions,
) -> Result<ExperimentResult> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    opts.validate()?;
    let start = Instant::now();
    let outcomes: Vec<TrialOutcome> = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<TrialOutcome> {
            let inst = generate_planted(n, s, p, trial_seed(seed, t))?;
            let (w, report) = exact_recover(&inst, opts)?;
            let cert = build_certificate(&inst)?;
            let error = inst.error(&w);
            Ok(TrialOutcome {
                trial: t,
                seed: inst.seed,
                error,
                success: inst.is_recovered(&w),
                certificate_holds: cert.certificate_holds,
                converged: report.converged,
                regenerations: inst.regenerations,
            })
        })
        .collect::<Result<_>>()?;
    let successes = outcomes.iter().filter(|o| o.success).count();
    Ok(ExperimentResult {
        n,
        s,
        mu: None,
        p,
        log_base: LogBase::Natural,
        trials,
        successes,
        mean_error: outcomes.iter().map(|o| o.error).sum::<f64>() / trials as f64,
        certificate_holds: outcomes.iter().filter(|o| o.certificate_holds).count(),
        counterexamples: outcomes
            .iter()
            .filter(|o| o.certificate_holds && o.converged && !o.success)
            .count(),
        regenerations: outcomes.iter().map(|o| o.regenerations).sum(),
        outcomes,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Monte-Carlo check of the sample-complexity bound at `P = sample_count(N, s, mu)`.
pub fn sample_complexity_experiment(
    n: usize,
    s: usize,
    mu: f64,
    trials: usize,
    seed: u64,
    base: LogBase,
    opts: &SolverOptions,
) -> Result<ExperimentResult> {
    if !(mu > 1.0) {
        return Err(Error::InvalidArgument(format!("mu must exceed 1, got {mu}")));
    }
    let p = sample_count(n, s, mu, base);
    let mut res = recovery_trials(n, s, p, trials, seed, opts)?;
    res.mu = Some(mu);
    res.log_base = base;
    Ok(res)
}

/// Per-trial success lower bound `1 - N^(1 - mu)`.
pub fn success_probability_bound(n: usize, mu: f64) -> f64 {
    1.0 - (n as f64).powf(1.0 - mu)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenFloorResult {
    pub s: usize,
    pub p: usize,
    pub t: f64,
    /// Smallest eigenvalue of `sum_{p in Omega} x_p x_p^T` per trial.
    pub samples: Vec<f64>,
    /// Fraction of trials with the eigenvalue at or below `P/2 + t`.
    pub fraction_below: f64,
    /// `s exp(-t^2 / (P(2s+1) - 2t/3))`.
    pub tail_bound: f64,
}

/// Tail bound on `lambda_min <= P/2 + t` for `t <= 0`.
pub fn eigen_floor_tail_bound(s: usize, p: usize, t: f64) -> f64 {
    let denom = p as f64 * (2 * s + 1) as f64 - 2.0 * t / 3.0;
    if denom <= 0.0 {
        return s as f64;
    }
    s as f64 * (-t * t / denom).exp()
}

/// Samples the smallest eigenvalue of the activated second-moment matrix on an
/// `s`-dimensional support, with activation decided by a random direction.
pub fn empirical_eigen_floor(s: usize, p: usize, trials: usize, t: f64, seed: u64) -> Result<EigenFloorResult> {
    if s == 0 || trials == 0 {
        return Err(Error::InvalidArgument("s and trials must be at least 1".into()));
    }
    if t > 0.0 {
        return Err(Error::InvalidArgument(format!("t must be nonpositive, got {t}")));
    }
    let samples: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(seed, k));
            let dir = loop {
                let d = DVector::from_fn(s, |_, _| rng.sample::<f64, _>(StandardNormal));
                if d.norm() > 0.0 {
                    break d;
                }
            };
            let u = DMatrix::from_fn(s, p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut m = DMatrix::zeros(s, s);
            for col in u.column_iter() {
                if col.dot(&dir) > 0.0 {
                    m += col * col.transpose();
                }
            }
            SymmetricEigen::new(m).eigenvalues.min()
        })
        .collect();
    let level = p as f64 / 2.0 + t;
    let below = samples.iter().filter(|&&v| v <= level).count();
    Ok(EigenFloorResult {
        s,
        p,
        t,
        fraction_below: below as f64 / trials as f64,
        tail_bound: eigen_floor_tail_bound(s, p, t),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::solve_layer;
    use crate::constraints::{build_layer_qcqp, LayerConstraintSpec};

    #[test]
    fn single_coordinate_instance() {
        let x = DMatrix::from_row_slice(1, 2, &[2.0, -1.0]);
        let inst = PlantedInstance::from_parts(x, DVector::from_vec(vec![1.0]), 0).unwrap();
        assert_eq!(inst.y.as_slice(), &[2.0, 0.0]);
        assert_eq!(inst.omega, vec![0]);
    }

    #[test]
    fn stored_observations_match_recomputation() {
        for seed in 0..5 {
            let inst = generate_planted(12, 3, 20, seed).unwrap();
            assert_eq!(inst.support.len(), 3);
            for p in 0..inst.p {
                let mut z = 0.0;
                for i in 0..inst.n {
                    z += inst.x[(i, p)] * inst.w_star[i];
                }
                let y = if z > 0.0 { z } else { 0.0 };
                assert_eq!(inst.y[p], y);
                if inst.y[p] > 0.0 {
                    assert!(inst.omega.contains(&p));
                }
            }
            assert!(inst.support.iter().all(|&i| inst.w_star[i].abs() >= MIN_PLANTED_MAGNITUDE));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_planted(10, 2, 15, 9).unwrap(), generate_planted(10, 2, 15, 9).unwrap());
        assert_ne!(generate_planted(10, 2, 15, 9).unwrap().x, generate_planted(10, 2, 15, 10).unwrap().x);
    }

    #[test]
    fn about_half_the_samples_activate() {
        let mut active = 0;
        let mut total = 0;
        for seed in 0..50 {
            let inst = generate_planted(8, 2, 200, seed).unwrap();
            active += inst.omega.len();
            total += inst.p;
        }
        let frac = active as f64 / total as f64;
        assert!((frac - 0.5).abs() <= 0.05, "{frac}");
    }

    #[test]
    fn invalid_generation_arguments() {
        assert!(generate_planted(4, 0, 5, 0).is_err());
        assert!(generate_planted(4, 5, 5, 0).is_err());
        assert!(generate_planted(4, 2, 0, 0).is_err());
    }

    #[test]
    fn identity_design_recovers() {
        let inst = PlantedInstance::from_parts(DMatrix::identity(2, 2), DVector::from_vec(vec![1.0, 0.0]), 0).unwrap();
        assert_eq!(inst.y.as_slice(), &[1.0, 0.0]);
        let (w, rep) = exact_recover(&inst, &SolverOptions::default()).unwrap();
        assert!(rep.converged);
        assert!(inst.is_recovered(&w), "{w}");

        let cert = build_certificate(&inst).unwrap();
        assert_eq!(cert.xi_omega, vec![1.0]);
        assert_eq!(cert.off_support_inf_norm, 0.0);
        assert!(cert.certificate_holds);
    }

    #[test]
    fn full_support_certificate_depends_only_on_rank() {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, 2.0, 0.0, 1.0, 1.0]);
        let inst = PlantedInstance::from_parts(x, DVector::from_vec(vec![1.0, 1.0]), 0).unwrap();
        let cert = build_certificate(&inst).unwrap();
        assert!(cert.full_rank);
        assert!(cert.certificate_holds);
        assert_eq!(cert.off_support_inf_norm, 0.0);

        // a single active sample cannot pin two coordinates
        let x = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 1.0, -1.0]);
        let inst = PlantedInstance::from_parts(x, DVector::from_vec(vec![1.0, 1.0]), 0).unwrap();
        let cert = build_certificate(&inst).unwrap();
        assert!(!cert.full_rank);
        assert!(!cert.certificate_holds);
    }

    #[test]
    fn certificate_matches_signs_on_support() {
        for seed in 0..10 {
            let inst = generate_planted(20, 3, 60, seed).unwrap();
            let cert = build_certificate(&inst).unwrap();
            if cert.full_rank {
                for &i in &inst.support {
                    assert!((cert.lambda[i] - inst.w_star[i].signum()).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn sample_count_formula() {
        assert_eq!(sample_count(64, 3, 2.0, LogBase::Natural), 425);
        assert_eq!(sample_count(64, 3, 2.0, LogBase::Ten), (51.0 * 2.0 * 64f64.log10()).ceil() as usize);
        assert!((success_probability_bound(64, 2.0) - (1.0 - 1.0 / 64.0)).abs() < 1e-15);
    }

    #[test]
    fn trial_counts() {
        let opts = SolverOptions::default();
        assert!(recovery_trials(6, 1, 10, 0, 0, &opts).is_err());
        let one = recovery_trials(6, 1, 10, 1, 0, &opts).unwrap();
        assert!(one.successes <= 1);
        assert_eq!(one.outcomes.len(), 1);
        assert!(sample_complexity_experiment(6, 1, 1.0, 1, 0, LogBase::Natural, &opts).is_err());
    }

    #[test]
    fn oversampled_recovery_and_certificate_agree() {
        let opts = SolverOptions::default();
        let res = recovery_trials(16, 2, 80, 6, 4, &opts).unwrap();
        for o in &res.outcomes {
            if o.certificate_holds {
                assert!(o.success, "{o:?}");
            }
        }
        assert!(res.successes >= 5, "{res:?}");
        assert_eq!(res.counterexamples, 0);
    }

    #[test]
    fn undersampled_recovery_mostly_fails() {
        let res = recovery_trials(64, 3, 5, 10, 1, &SolverOptions::default()).unwrap();
        assert!(res.successes <= 2, "{res:?}");
    }

    #[test]
    fn scale_equivariance() {
        let inst = generate_planted(16, 2, 60, 5).unwrap();
        let alpha = 3.5;
        let scaled = PlantedInstance::from_parts(inst.x.clone(), &inst.w_star * alpha, inst.seed).unwrap();
        assert_eq!(scaled.omega, inst.omega);
        assert_eq!(scaled.support, inst.support);
        for p in 0..inst.p {
            assert!((scaled.y[p] - alpha * inst.y[p]).abs() <= 1e-12 * scaled.y[p].abs().max(1.0));
        }
        let c1 = build_certificate(&inst).unwrap();
        let c2 = build_certificate(&scaled).unwrap();
        assert_eq!(c1.certificate_holds, c2.certificate_holds);
        let opts = SolverOptions::default();
        let (w1, _) = exact_recover(&inst, &opts).unwrap();
        let (w2, _) = exact_recover(&scaled, &opts).unwrap();
        assert!((&w1 * alpha - &w2).amax() <= 1e-5 * alpha, "{}", (&w1 * alpha - &w2).amax());
    }

    #[test]
    fn matrix_recovery_decouples_by_column() {
        // four planted columns sharing one design
        let (n, p, m) = (12, 60, 4);
        let base = generate_planted(n, 2, p, 31).unwrap();
        let mut w_star = DMatrix::zeros(n, m);
        let mut cols = Vec::new();
        for j in 0..m {
            let inst = generate_planted(n, 2, p, 100 + j as u64).unwrap();
            w_star.set_column(j, &inst.w_star);
            cols.push(PlantedInstance::from_parts(base.x.clone(), inst.w_star.clone(), 0).unwrap());
        }
        let y = base.x.tr_mul(&w_star).map(|v| v.max(0.0)).transpose();
        let spec = LayerConstraintSpec::parallel(base.x.clone(), y, 0.0).unwrap();
        let q = build_layer_qcqp(&spec).unwrap();
        let opts = SolverOptions::default();
        let (w, rep) = solve_layer(&q, &opts).unwrap();
        assert!(rep.converged);
        let mut joint_ok = true;
        let mut each_ok = true;
        for (j, inst) in cols.iter().enumerate() {
            let wj = w.column(j).into_owned();
            joint_ok &= inst.is_recovered(&wj);
            let (wi, _) = exact_recover(inst, &opts).unwrap();
            each_ok &= inst.is_recovered(&wi);
        }
        assert_eq!(joint_ok, each_ok);
    }

    #[test]
    fn eigen_floor_single_coordinate_mean() {
        // half the samples survive and each contributes E[u^2 | u > 0] = 1
        let p = 100;
        let res = empirical_eigen_floor(1, p, 400, 0.0, 2).unwrap();
        let mean = res.samples.iter().sum::<f64>() / res.samples.len() as f64;
        assert!((mean - p as f64 / 2.0).abs() <= 1.5, "{mean}");
    }

    #[test]
    fn eigen_floor_edge_cases() {
        let res = empirical_eigen_floor(2, 0, 3, 0.0, 0).unwrap();
        assert!(res.samples.iter().all(|&v| v == 0.0));
        assert!(empirical_eigen_floor(2, 10, 3, 1.0, 0).is_err());
        assert!(empirical_eigen_floor(2, 10, 0, 0.0, 0).is_err());
    }

    #[test]
    fn eigen_floor_respects_tail_bound() {
        let (s, p) = (3, 425);
        let t = -(p as f64) / 4.0;
        let res = empirical_eigen_floor(s, p, 50, t, 8).unwrap();
        assert!(res.fraction_below <= res.tail_bound, "{} > {}", res.fraction_below, res.tail_bound);
    }
}
