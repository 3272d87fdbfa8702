//! Machine-readable run reports and their plain-text renderings.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::model::{sparsity_ratio, NetworkModel};
use crate::solver::SolverReport;
use crate::trim::{BoundLedger, TrimConfig, TrimResult};

/// Bumped whenever a field changes meaning or disappears.
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    /// 1-based.
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
    pub relu: bool,
    pub epsilon: f64,
    pub nnz_before: usize,
    pub nnz_after: usize,
    /// Fraction of entries above `zero_tol`.
    pub sparsity_ratio_before: f64,
    pub sparsity_ratio_after: f64,
    /// `||Yhat(l) - Y(l)||_F` through the pruned network.
    pub discrepancy: f64,
    pub thresholded: bool,
    pub solver: SolverReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInput {
    pub model: String,
    pub data: String,
    pub samples: usize,
    pub widths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub report_version: u32,
    pub seed: u64,
    pub config: TrimConfig,
    pub input: RunInput,
    pub layers: Vec<LayerReport>,
    /// `||Z - Zhat||_F / ||Z||_F` at the output.
    pub relative_discrepancy: f64,
    pub bounds: BoundLedger,
    pub gamma_at_one: bool,
    pub converged: bool,
    /// Converged and every bound holds.
    pub pass: bool,
    pub timings: Timings,
}

impl RunReport {
    pub fn from_trim(
        result: &TrimResult,
        net_before: &NetworkModel,
        config: &TrimConfig,
        input: RunInput,
        seed: u64,
        total_secs: f64,
    ) -> Self {
        let layers = result
            .layers
            .iter()
            .map(|lt| {
                let before = net_before.layer(lt.layer - 1).as_matrix();
                let after = result.pruned.layer(lt.layer - 1).as_matrix();
                LayerReport {
                    layer: lt.layer,
                    rows: before.nrows(),
                    cols: before.ncols(),
                    relu: net_before.is_relu_layer(lt.layer - 1),
                    epsilon: lt.epsilon,
                    nnz_before: lt.nnz_before,
                    nnz_after: lt.nnz_after,
                    sparsity_ratio_before: sparsity_ratio(before, config.zero_tol),
                    sparsity_ratio_after: sparsity_ratio(after, config.zero_tol),
                    discrepancy: lt.discrepancy,
                    thresholded: lt.thresholded,
                    solver: lt.report.clone(),
                }
            })
            .collect();
        Self {
            report_version: REPORT_VERSION,
            seed,
            config: config.clone(),
            input,
            layers,
            relative_discrepancy: result.relative_discrepancy,
            bounds: result.bounds.clone(),
            gamma_at_one: result.gamma_at_one,
            converged: result.converged,
            pass: result.converged && result.bounds.pass,
            timings: Timings { total_secs },
        }
    }

    /// JSON value with wall-clock fields removed, for reproducibility checks.
    pub fn reproducible_view(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("timings");
        }
        v
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "mode {:?}  eps_rel {}  gamma {}  kappa {}  samples {}",
            self.config.mode, self.config.epsilon_rel, self.config.gamma, self.config.kappa, self.input.samples
        );
        let _ = writeln!(
            out,
            "{:>5} {:>9} {:>12} {:>8} {:>8} {:>8} {:>12} {:>6}",
            "layer", "shape", "epsilon", "nnz", "pruned", "ratio", "discrepancy", "conv"
        );
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{:>5} {:>9} {:>12.4e} {:>8} {:>8} {:>8.4} {:>12.4e} {:>6}",
                l.layer,
                format!("{}x{}", l.rows, l.cols),
                l.epsilon,
                l.nnz_before,
                l.nnz_after,
                l.sparsity_ratio_after,
                l.discrepancy,
                l.solver.converged
            );
        }
        let _ = writeln!(
            out,
            "relative discrepancy {:.6}  bounds {}  converged {}",
            self.relative_discrepancy,
            if self.bounds.pass { "pass" } else { "FAIL" },
            self.converged
        );
        out
    }

    /// One row per layer for external plotting.
    pub fn csv_rows(&self) -> (Vec<&'static str>, Vec<Vec<String>>) {
        let header = vec![
            "layer",
            "rows",
            "cols",
            "epsilon",
            "nnz_before",
            "nnz_after",
            "sparsity_ratio_before",
            "sparsity_ratio_after",
            "discrepancy",
            "bound_measured",
            "bound_claimed",
            "bound_pass",
            "objective",
            "iterations",
            "converged",
        ];
        let rows = self
            .layers
            .iter()
            .map(|l| {
                let b = self.bounds.entries.iter().find(|e| e.layer == l.layer);
                vec![
                    l.layer.to_string(),
                    l.rows.to_string(),
                    l.cols.to_string(),
                    l.epsilon.to_string(),
                    l.nnz_before.to_string(),
                    l.nnz_after.to_string(),
                    l.sparsity_ratio_before.to_string(),
                    l.sparsity_ratio_after.to_string(),
                    l.discrepancy.to_string(),
                    b.map_or(String::new(), |b| b.measured.to_string()),
                    b.map_or(String::new(), |b| b.claimed.to_string()),
                    b.map_or(String::new(), |b| b.pass.to_string()),
                    l.solver.objective.to_string(),
                    l.solver.iterations.to_string(),
                    l.solver.converged.to_string(),
                ]
            })
            .collect();
        (header, rows)
    }
}
