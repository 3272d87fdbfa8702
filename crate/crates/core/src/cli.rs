//! Command-line surface. `run` parses arguments and returns the process exit code:
//! 0 on success, 1 on errors or flagged failures, 2 on usage errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::datagen::{accuracy, gen_spirals, predict, train_with_history, SpiralConfig, TrainConfig};
use crate::io::{
    load_csv_data, load_model, read_json, save_model, save_model_with_ledger, write_csv_data, write_csv_table,
    write_json, CsvOptions,
};
use crate::model::DEFAULT_ZERO_TOL;
use crate::recovery::{
    empirical_eigen_floor, recovery_trials, sample_complexity_experiment, success_probability_bound, LogBase,
};
use crate::report::{RunInput, RunReport};
use crate::solver::SolverOptions;
use crate::trim::{check_bounds, trim, BoundLedger, BoundSpec, ClusterSpec, TrimConfig, TrimMode};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "nettrim", version, about = "Convex layer-wise pruning of ReLU networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a two-class nested-spiral dataset as CSV (label in the last column).
    GenData(GenDataArgs),
    /// Train a ReLU classifier on labelled CSV data and save it as a model directory.
    Train(TrainArgs),
    /// Prune a saved model against its training data.
    Trim(TrimArgs),
    /// Re-check the discrepancy bounds of a pruned model from its report.
    Verify(VerifyArgs),
    /// Monte-Carlo exact-recovery experiment on planted Gaussian instances.
    Recover(RecoverArgs),
    /// Empirical smallest eigenvalue of the activated second-moment matrix.
    EigenFloor(EigenFloorArgs),
    /// Render a saved run report as a table or CSV.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Parallel,
    Cascade,
}

impl From<ModeArg> for TrimMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Parallel => TrimMode::Parallel,
            ModeArg::Cascade => TrimMode::Cascade,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LogBaseArg {
    #[value(name = "e")]
    E,
    #[value(name = "10")]
    Ten,
}

impl From<LogBaseArg> for LogBase {
    fn from(b: LogBaseArg) -> Self {
        match b {
            LogBaseArg::E => LogBase::Natural,
            LogBaseArg::Ten => LogBase::Ten,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Table,
    Csv,
}

/// `layer`, `neuron` or `k:<n>`.
pub fn parse_clusters(s: &str) -> std::result::Result<ClusterSpec, String> {
    match s {
        "layer" => Ok(ClusterSpec::WholeLayer),
        "neuron" => Ok(ClusterSpec::Singleton),
        _ => {
            let k = s
                .strip_prefix("k:")
                .ok_or_else(|| format!("expected layer, neuron or k:<n>, got {s:?}"))?;
            match k.parse::<usize>() {
                Ok(k) if k > 0 => Ok(ClusterSpec::Count(k)),
                _ => Err(format!("cluster count {k:?} is not a positive integer")),
            }
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 200)]
    pub points_per_class: usize,
    #[arg(long, default_value_t = 2.0)]
    pub turns: f64,
    #[arg(long, default_value_t = 0.1)]
    pub radial_scale: f64,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub header: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// CSV with one sample per line and the class id last.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub header: bool,
    /// Comma-separated layer widths, input first.
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 50, 50, 2])]
    pub widths: Vec<usize>,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.0)]
    pub l1: f64,
    /// Train a purely linear first layer (no constant input row).
    #[arg(long)]
    pub no_input_bias: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model directory; a `train_report.json` is written alongside the manifest.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrimArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// The last CSV column is a class label and is ignored.
    #[arg(long)]
    pub labels: bool,
    #[arg(long)]
    pub header: bool,
    #[arg(long, value_enum, default_value_t = ModeArg::Parallel)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0.01)]
    pub epsilon_rel: f64,
    #[arg(long, default_value_t = 1.1)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub kappa: f64,
    #[arg(long, value_parser = parse_clusters, default_value = "layer")]
    pub clusters: ClusterSpec,
    #[arg(long)]
    pub link_normalize: bool,
    #[arg(long, default_value_t = DEFAULT_ZERO_TOL)]
    pub zero_tol: f64,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Echoed into the report; the pipeline itself is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output directory for `report.json` and the pruned `model/`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Original model.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub pruned: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub labels: bool,
    #[arg(long)]
    pub header: bool,
    /// Run report whose mode, gamma, kappa and tolerances are checked.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RecoverArgs {
    #[arg(long = "N")]
    pub n: usize,
    #[arg(long = "s")]
    pub s: usize,
    #[arg(long = "mu", default_value_t = 2.0)]
    pub mu: f64,
    /// Sample count; overrides the one derived from `--mu`.
    #[arg(long = "P")]
    pub p: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = LogBaseArg::E)]
    pub log_base: LogBaseArg,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EigenFloorArgs {
    #[arg(long = "s")]
    pub s: usize,
    #[arg(long = "P")]
    pub p: usize,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long = "t", default_value_t = 0.0, allow_hyphen_values = true)]
    pub t: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub report: PathBuf,
    #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
    pub format: ReportFormat,
    /// Write here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub samples: usize,
    pub final_loss: f64,
    pub accuracy: f64,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoverReport {
    #[serde(flatten)]
    pub result: crate::recovery::ExperimentResult,
    pub success_rate: f64,
    /// `1 - N^(1 - mu)`, only when the sample count came from `mu`.
    pub per_trial_bound: Option<f64>,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(Outcome::Pass) => EXIT_OK,
        Ok(Outcome::Flagged(why)) => {
            eprintln!("failed: {why}");
            EXIT_FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

enum Outcome {
    Pass,
    Flagged(String),
}

fn execute(cmd: Command) -> Result<Outcome> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Trim(a) => with_jobs(a.jobs, || trim_cmd(a)),
        Command::Verify(a) => verify_cmd(a),
        Command::Recover(a) => with_jobs(a.jobs, || recover_cmd(a)),
        Command::EigenFloor(a) => with_jobs(a.jobs, || eigen_cmd(a)),
        Command::Report(a) => report_cmd(a),
    }
}

fn with_jobs<T>(jobs: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T>
where
    T: Send,
{
    match jobs {
        None => f(),
        Some(0) => Err(Error::InvalidArgument("--jobs must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .install(f),
    }
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn gen_data(a: GenDataArgs) -> Result<Outcome> {
    let cfg = SpiralConfig {
        points_per_class: a.points_per_class,
        turns: a.turns,
        radial_scale: a.radial_scale,
        noise: a.noise,
        seed: a.seed,
    };
    let (x, labels) = gen_spirals(&cfg)?;
    write_csv_data(&a.out, &x, Some(&labels), a.header)?;
    println!("wrote {} samples to {}", x.ncols(), a.out.display());
    Ok(Outcome::Pass)
}

fn train_cmd(a: TrainArgs) -> Result<Outcome> {
    let data = load_csv_data(&a.data, CsvOptions { header: a.header, labels: true })?;
    let labels = data.labels.unwrap_or_default();
    let cfg = TrainConfig {
        widths: a.widths,
        learning_rate: a.learning_rate,
        momentum: a.momentum,
        epochs: a.epochs,
        batch_size: a.batch_size,
        l1: a.l1,
        input_bias: !a.no_input_bias,
        seed: a.seed,
    };
    let out = train_with_history(&data.x, &labels, &cfg)?;
    let acc = accuracy(&predict(&out.net, &data.x)?, &labels);
    save_model(&out.net, &a.out)?;
    let report = TrainReport {
        config: cfg,
        samples: data.x.ncols(),
        final_loss: out.losses.last().copied().unwrap_or(f64::NAN),
        accuracy: acc,
        losses: out.losses,
    };
    write_json(&a.out.join("train_report.json"), &report)?;
    println!("training accuracy {acc:.4}  loss {:.6}", report.final_loss);
    Ok(Outcome::Pass)
}

fn trim_cmd(a: TrimArgs) -> Result<Outcome> {
    let start = Instant::now();
    let net = load_model(&a.model)?;
    let data = load_csv_data(&a.data, CsvOptions { header: a.header, labels: a.labels })?;
    let mut solver = SolverOptions::default();
    if let Some(m) = a.max_iters {
        solver.max_iters = m;
    }
    let config = TrimConfig {
        mode: a.mode.into(),
        epsilon_rel: a.epsilon_rel,
        layer_epsilons: None,
        gamma: a.gamma,
        kappa: a.kappa,
        clusters: a.clusters,
        solver,
        link_normalize: a.link_normalize,
        zero_tol: a.zero_tol,
        jobs: a.jobs,
    };
    let result = trim(&net, &data.x, &config)?;
    save_model_with_ledger(&result.pruned, result.ledger.as_ref(), &a.out.join("model"))?;
    let input = RunInput {
        model: a.model.display().to_string(),
        data: a.data.display().to_string(),
        samples: data.x.ncols(),
        widths: net.widths(),
    };
    let report = RunReport::from_trim(&result, &net, &config, input, a.seed, start.elapsed().as_secs_f64());
    write_json(&a.out.join("report.json"), &report)?;
    print!("{}", report.table());
    if report.gamma_at_one {
        eprintln!("warning: gamma = 1 leaves the cascade no slack to absorb earlier drift");
    }
    Ok(flag_run(report.converged, &report.bounds))
}

fn flag_run(converged: bool, bounds: &BoundLedger) -> Outcome {
    let mut why = Vec::new();
    if !converged {
        why.push("solver did not converge".to_string());
    }
    for e in bounds.entries.iter().filter(|e| !e.pass) {
        why.push(format!("layer {} bound violated ({:.3e} > {:.3e})", e.layer, e.measured, e.claimed));
    }
    if why.is_empty() { Outcome::Pass } else { Outcome::Flagged(why.join("; ")) }
}

fn verify_cmd(a: VerifyArgs) -> Result<Outcome> {
    let net = load_model(&a.model)?;
    let pruned = load_model(&a.pruned)?;
    let data = load_csv_data(&a.data, CsvOptions { header: a.header, labels: a.labels })?;
    let report: RunReport = read_json(&a.report)?;
    let epsilons: Vec<f64> = report.layers.iter().map(|l| l.epsilon).collect();
    let spec = BoundSpec {
        mode: report.config.mode,
        gamma: report.config.gamma,
        kappa: report.config.kappa,
        epsilons: &epsilons,
    };
    let ledger = check_bounds(&spec, &net, &pruned, &data.x, report.config.solver.feasibility_slack)?;
    for e in &ledger.entries {
        println!(
            "layer {:>2}  measured {:.6e}  claimed {:.6e}  {}",
            e.layer,
            e.measured,
            e.claimed,
            if e.pass { "pass" } else { "FAIL" }
        );
    }
    if let Some(out) = &a.out {
        write_json(out, &ledger)?;
    }
    Ok(flag_run(true, &ledger))
}

fn recover_cmd(a: RecoverArgs) -> Result<Outcome> {
    let opts = SolverOptions::default();
    let (result, bound) = match a.p {
        Some(p) => (recovery_trials(a.n, a.s, p, a.trials, a.seed, &opts)?, None),
        None => (
            sample_complexity_experiment(a.n, a.s, a.mu, a.trials, a.seed, a.log_base.into(), &opts)?,
            Some(success_probability_bound(a.n, a.mu)),
        ),
    };
    let report = RecoverReport {
        success_rate: result.success_rate(),
        per_trial_bound: bound,
        result,
    };
    emit_json(&report, a.out.as_deref())?;
    eprintln!(
        "N {} s {} P {}: {}/{} recovered, {} certified, {} counterexamples",
        report.result.n,
        report.result.s,
        report.result.p,
        report.result.successes,
        report.result.trials,
        report.result.certificate_holds,
        report.result.counterexamples
    );
    if report.result.counterexamples > 0 {
        return Ok(Outcome::Flagged(format!(
            "{} certified trials were not recovered",
            report.result.counterexamples
        )));
    }
    Ok(Outcome::Pass)
}

fn eigen_cmd(a: EigenFloorArgs) -> Result<Outcome> {
    let res = empirical_eigen_floor(a.s, a.p, a.trials, a.t, a.seed)?;
    emit_json(&res, a.out.as_deref())?;
    eprintln!(
        "fraction at or below P/2 + t: {:.4}  tail bound {:.4}",
        res.fraction_below, res.tail_bound
    );
    Ok(Outcome::Pass)
}

fn report_cmd(a: ReportArgs) -> Result<Outcome> {
    let report: RunReport = read_json(&a.report)?;
    match (a.format, &a.out) {
        (ReportFormat::Table, None) => print!("{}", report.table()),
        (ReportFormat::Table, Some(p)) => std::fs::write(p, report.table())?,
        (ReportFormat::Csv, Some(p)) => {
            let (header, rows) = report.csv_rows();
            write_csv_table(p, &header, &rows)?;
        }
        (ReportFormat::Csv, None) => {
            let (header, rows) = report.csv_rows();
            let mut w = csv::Writer::from_writer(std::io::stdout());
            let err = |e: csv::Error| Error::Csv(e.to_string());
            w.write_record(&header).map_err(err)?;
            for r in &rows {
                w.write_record(r).map_err(err)?;
            }
            w.flush()?;
        }
    }
    Ok(Outcome::Pass)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cluster_flag_forms() {
        assert_eq!(parse_clusters("layer"), Ok(ClusterSpec::WholeLayer));
        assert_eq!(parse_clusters("neuron"), Ok(ClusterSpec::Singleton));
        assert_eq!(parse_clusters("k:4"), Ok(ClusterSpec::Count(4)));
        assert!(parse_clusters("k:0").is_err());
        assert!(parse_clusters("k:x").is_err());
        assert!(parse_clusters("all").is_err());
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        assert_eq!(run(["nettrim", "trim", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["nettrim", "frobnicate"]), EXIT_USAGE);
    }

    #[test]
    fn recover_flags_parse_with_uppercase_names() {
        let cli = Cli::try_parse_from(["nettrim", "recover", "--N", "64", "--s", "3", "--mu", "2", "--log-base", "10"])
            .unwrap();
        match cli.command {
            Command::Recover(a) => {
                assert_eq!((a.n, a.s, a.mu, a.p), (64, 3, 2.0, None));
                assert_eq!(a.log_base, LogBaseArg::Ten);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn negative_t_is_accepted() {
        let cli = Cli::try_parse_from(["nettrim", "eigen-floor", "--s", "3", "--P", "50", "--t", "-5"]).unwrap();
        match cli.command {
            Command::EigenFloor(a) => assert_eq!(a.t, -5.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
