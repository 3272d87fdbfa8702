//! Feed-forward ReLU networks without bias terms.
//!
//! A network maps an `N x P` sample matrix (one sample per column) through
//! `Y(l) = max(W_l^T Y(l-1), 0)`. The final layer may be linear. Affine layers
//! are emulated with [`NetworkModel::with_input_bias`], which appends a
//! constant-one row to the input before the first layer.

use std::ops::Deref;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default tolerance below which a weight counts as zero.
pub const DEFAULT_ZERO_TOL: f64 = 1e-8;

/// A dense, finite, non-empty layer matrix `W_l` of shape `N_{l-1} x N_l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix(DMatrix<f64>);

impl WeightMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() == 0 || m.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "weight matrix must be non-empty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("weight matrix"));
        }
        Ok(Self(m))
    }

    pub fn from_column_slice(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Self::new(DMatrix::from_column_slice(rows, cols, data))
    }

    /// Entry-absolute sum, the norm used for link normalization.
    pub fn l1_mass(&self) -> f64 {
        l1_mass(&self.0)
    }

    pub fn nnz(&self, zero_tol: f64) -> usize {
        self.0.iter().filter(|v| v.abs() > zero_tol).count()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

impl Deref for WeightMatrix {
    type Target = DMatrix<f64>;

    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    layers: Vec<WeightMatrix>,
    last_layer_linear: bool,
    #[serde(default)]
    input_bias: bool,
}

impl NetworkModel {
    pub fn new(layers: Vec<WeightMatrix>, last_layer_linear: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].ncols() != pair[1].nrows() {
                return Err(Error::Dimension(format!(
                    "layer {} has {} outputs but layer {} expects {} inputs",
                    l,
                    pair[0].ncols(),
                    l + 1,
                    pair[1].nrows()
                )));
            }
        }
        Ok(Self {
            layers,
            last_layer_linear,
            input_bias: false,
        })
    }

    /// Treat the last row of the first layer as a bias row fed by a constant one.
    pub fn with_input_bias(mut self, input_bias: bool) -> Self {
        self.input_bias = input_bias;
        self
    }

    pub fn layers(&self) -> &[WeightMatrix] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &WeightMatrix {
        &self.layers[l]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn last_layer_linear(&self) -> bool {
        self.last_layer_linear
    }

    pub fn input_bias(&self) -> bool {
        self.input_bias
    }

    /// Number of raw input features, excluding the constant bias row.
    pub fn input_dim(&self) -> usize {
        self.layers[0].nrows() - usize::from(self.input_bias)
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].ncols()
    }

    /// Whether layer `l` (0-based) applies a ReLU.
    pub fn is_relu_layer(&self, l: usize) -> bool {
        !(self.last_layer_linear && l + 1 == self.layers.len())
    }

    /// Layer widths `N_0, ..., N_L` as seen by the weight matrices.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].nrows())
            .chain(self.layers.iter().map(|w| w.ncols()))
            .collect()
    }

    pub fn total_nnz(&self, zero_tol: f64) -> usize {
        self.layers.iter().map(|w| w.nnz(zero_tol)).sum()
    }

    /// Same architecture with layer weights replaced.
    pub fn with_layers(&self, layers: Vec<WeightMatrix>) -> Result<Self> {
        if layers.len() != self.layers.len()
            || layers
                .iter()
                .zip(&self.layers)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Dimension("replacement layers change the architecture".into()));
        }
        Ok(Self {
            layers,
            last_layer_linear: self.last_layer_linear,
            input_bias: self.input_bias,
        })
    }

    /// Input as seen by the first layer: `X` itself, or `X` with a ones row appended.
    pub fn prepare_input(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input has {} rows, network expects {}",
                x.nrows(),
                self.input_dim()
            )));
        }
        if !self.input_bias {
            return Ok(x.clone());
        }
        let (n, p) = x.shape();
        let mut out = DMatrix::from_element(n + 1, p, 1.0);
        out.rows_mut(0, n).copy_from(x);
        Ok(out)
    }
}

/// Layer signals `Y(0) ... Y(L)`; `Y(0)` is the (possibly augmented) input.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalStack {
    levels: Vec<DMatrix<f64>>,
}

impl SignalStack {
    pub fn levels(&self) -> &[DMatrix<f64>] {
        &self.levels
    }

    pub fn level(&self, l: usize) -> &DMatrix<f64> {
        &self.levels[l]
    }

    pub fn output(&self) -> &DMatrix<f64> {
        &self.levels[self.levels.len() - 1]
    }

    pub fn num_samples(&self) -> usize {
        self.levels[0].ncols()
    }

    pub fn into_levels(self) -> Vec<DMatrix<f64>> {
        self.levels
    }
}

pub fn relu(z: &DMatrix<f64>) -> DMatrix<f64> {
    z.map(|v| v.max(0.0))
}

pub fn forward(net: &NetworkModel, x: &DMatrix<f64>) -> Result<SignalStack> {
    let mut levels = Vec::with_capacity(net.num_layers() + 1);
    levels.push(net.prepare_input(x)?);
    for (l, w) in net.layers().iter().enumerate() {
        let z = w.tr_mul(&levels[l]);
        levels.push(if net.is_relu_layer(l) { relu(&z) } else { z });
    }
    Ok(SignalStack { levels })
}

/// Per-layer l1 masses removed by link normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleLedger {
    masses: Vec<f64>,
}

impl ScaleLedger {
    pub fn from_masses(masses: Vec<f64>) -> Result<Self> {
        if let Some(layer) = masses.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::ZeroMass { layer });
        }
        Ok(Self { masses })
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    /// `prod_{j <= l} s_j` for 1-based level `l`; level 0 (the input) has factor 1.
    pub fn cumulative(&self, level: usize) -> f64 {
        self.masses[..level].iter().product()
    }

    /// Map signals of the normalized network back to the original scale.
    pub fn restore(&self, normalized: &SignalStack) -> SignalStack {
        let levels = normalized
            .levels
            .iter()
            .enumerate()
            .map(|(l, y)| y * self.cumulative(l))
            .collect();
        SignalStack { levels }
    }

    /// Scale layer weights of a normalized network back to the original domain.
    pub fn denormalize(&self, net: &NetworkModel) -> Result<NetworkModel> {
        let layers = net
            .layers()
            .iter()
            .zip(&self.masses)
            .map(|(w, s)| WeightMatrix::new(w.as_matrix() * *s))
            .collect::<Result<Vec<_>>>()?;
        net.with_layers(layers)
    }

    /// Scale original-domain weights into the normalized domain.
    pub fn normalize(&self, net: &NetworkModel) -> Result<NetworkModel> {
        let layers = net
            .layers()
            .iter()
            .zip(&self.masses)
            .map(|(w, s)| WeightMatrix::new(w.as_matrix() / *s))
            .collect::<Result<Vec<_>>>()?;
        net.with_layers(layers)
    }
}

pub fn link_normalize(net: &NetworkModel) -> Result<(NetworkModel, ScaleLedger)> {
    let masses: Vec<f64> = net.layers().iter().map(|w| w.l1_mass()).collect();
    if let Some(layer) = masses.iter().position(|s| *s <= 0.0) {
        return Err(Error::ZeroMass { layer });
    }
    let ledger = ScaleLedger::from_masses(masses)?;
    let normalized = ledger.normalize(net)?;
    Ok((normalized, ledger))
}

pub fn l1_mass(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v.abs()).sum()
}

/// Fraction of entries with magnitude above `zero_tol`.
pub fn sparsity_ratio(w: &DMatrix<f64>, zero_tol: f64) -> f64 {
    if w.is_empty() {
        return 0.0;
    }
    let active = w.iter().filter(|v| v.abs() > zero_tol).count();
    active as f64 / w.len() as f64
}

/// `||Z - Z_hat||_F / ||Z||_F`.
pub fn relative_discrepancy(z: &DMatrix<f64>, z_hat: &DMatrix<f64>) -> Result<f64> {
    if z.shape() != z_hat.shape() {
        return Err(Error::Dimension(format!(
            "{:?} vs {:?}",
            z.shape(),
            z_hat.shape()
        )));
    }
    let denom = z.norm();
    if denom == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok((z - z_hat).norm() / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_net(seed: u64, widths: &[usize], linear: bool) -> NetworkModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|w| WeightMatrix::new(random_matrix(&mut rng, w[0], w[1])).unwrap())
            .collect();
        NetworkModel::new(layers, linear).unwrap()
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&dmatrix![1.0, -2.0; 0.0, 3.0]), dmatrix![1.0, 0.0; 0.0, 3.0]);
        assert_eq!(relu(&dmatrix![-1.0, -0.5; -3.0, -2.0]), DMatrix::zeros(2, 2));
        let v = dmatrix![-1.0, 3.0];
        assert_eq!(relu(&(&v * 2.0)), relu(&v) * 2.0);
        assert_eq!(relu(&(&v * 2.0)), dmatrix![0.0, 6.0]);
    }

    #[test]
    fn forward_identity_and_small_cases() {
        let id = WeightMatrix::new(DMatrix::identity(3, 3)).unwrap();
        let net = NetworkModel::new(vec![id], false).unwrap();
        let x = dmatrix![1.0, 2.0; 0.0, 3.0; 4.0, 0.5];
        assert_eq!(forward(&net, &x).unwrap().output(), &x);

        let w = WeightMatrix::new(dmatrix![1.0; -1.0]).unwrap();
        let net = NetworkModel::new(vec![w], false).unwrap();
        let y = forward(&net, &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(y.output(), &dmatrix![1.0, 0.0]);
    }

    #[test]
    fn forward_matches_straight_line_recomputation() {
        let net = random_net(7, &[4, 6, 3], false);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = random_matrix(&mut rng, 4, 9);
        let stack = forward(&net, &x).unwrap();

        // independent triple loop
        let mut cur: Vec<Vec<f64>> = (0..4).map(|i| (0..9).map(|p| x[(i, p)]).collect()).collect();
        for w in net.layers() {
            let mut next = vec![vec![0.0; 9]; w.ncols()];
            for (m, row) in next.iter_mut().enumerate() {
                for (p, out) in row.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (n, inp) in cur.iter().enumerate() {
                        acc += w[(n, m)] * inp[p];
                    }
                    *out = if acc > 0.0 { acc } else { 0.0 };
                }
            }
            cur = next;
        }
        for (m, row) in cur.iter().enumerate() {
            for (p, v) in row.iter().enumerate() {
                assert!((stack.output()[(m, p)] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_last_layer_skips_relu() {
        let w = WeightMatrix::new(dmatrix![-1.0]).unwrap();
        let net = NetworkModel::new(vec![w], true).unwrap();
        let y = forward(&net, &dmatrix![2.0]).unwrap();
        assert_eq!(y.output()[(0, 0)], -2.0);
    }

    #[test]
    fn dimension_errors() {
        let a = WeightMatrix::new(DMatrix::zeros(2, 3)).unwrap();
        let b = WeightMatrix::new(DMatrix::zeros(2, 1)).unwrap();
        assert!(matches!(NetworkModel::new(vec![a.clone(), b], false), Err(Error::Dimension(_))));
        let net = NetworkModel::new(vec![a], false).unwrap();
        assert!(forward(&net, &DMatrix::zeros(3, 4)).is_err());
        assert!(WeightMatrix::new(DMatrix::from_element(1, 1, f64::NAN)).is_err());
    }

    #[test]
    fn input_bias_appends_ones_row() {
        let w = WeightMatrix::new(dmatrix![1.0; 2.0]).unwrap();
        let net = NetworkModel::new(vec![w], false).unwrap().with_input_bias(true);
        assert_eq!(net.input_dim(), 1);
        let y = forward(&net, &dmatrix![-1.0, 1.0]).unwrap();
        assert_eq!(y.level(0), &dmatrix![-1.0, 1.0; 1.0, 1.0]);
        assert_eq!(y.output(), &dmatrix![1.0, 3.0]);
    }

    #[test]
    fn link_normalize_examples() {
        let w = WeightMatrix::new(dmatrix![1.0, -1.0; 0.5, -1.5]).unwrap();
        let net = NetworkModel::new(vec![w], false).unwrap();
        let (normed, ledger) = link_normalize(&net).unwrap();
        assert_eq!(ledger.masses(), &[4.0]);
        assert_eq!(normed.layer(0).as_matrix(), &(net.layer(0).as_matrix() / 4.0));
        assert!((normed.layer(0).l1_mass() - 1.0).abs() < 1e-15);

        let (again, ones) = link_normalize(&normed).unwrap();
        assert_eq!(ones.masses(), &[1.0]);
        assert_eq!(again, normed);

        let z = WeightMatrix::new(DMatrix::zeros(2, 2)).unwrap();
        let net = NetworkModel::new(vec![z], false).unwrap();
        assert!(matches!(link_normalize(&net), Err(Error::ZeroMass { layer: 0 })));
    }

    #[test]
    fn ledger_restores_original_signals() {
        for seed in 0..5 {
            let net = random_net(seed, &[3, 7, 5, 2], seed % 2 == 0);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = random_matrix(&mut rng, 3, 20) * 3.0;
            let orig = forward(&net, &x).unwrap();
            let (normed, ledger) = link_normalize(&net).unwrap();
            let restored = ledger.restore(&forward(&normed, &x).unwrap());
            for (a, b) in orig.levels().iter().zip(restored.levels()) {
                assert!((a - b).amax() <= 1e-12, "seed {seed}: {}", (a - b).amax());
            }
            let back = ledger.denormalize(&normed).unwrap();
            for (a, b) in back.layers().iter().zip(net.layers()) {
                assert!((a.as_matrix() - b.as_matrix()).amax() < 1e-14);
            }
        }
    }

    #[test]
    fn sparsity_ratio_examples() {
        assert_eq!(sparsity_ratio(&DMatrix::zeros(3, 3), DEFAULT_ZERO_TOL), 0.0);
        assert_eq!(sparsity_ratio(&DMatrix::from_element(2, 5, 0.3), 0.0), 1.0);
        assert_eq!(sparsity_ratio(&dmatrix![1e-9, 1.0], DEFAULT_ZERO_TOL), 0.5);
    }

    #[test]
    fn relative_discrepancy_examples() {
        let z = dmatrix![1.0, -2.0; 3.0, 0.5];
        assert_eq!(relative_discrepancy(&z, &z).unwrap(), 0.0);
        assert!((relative_discrepancy(&z, &(&z * 1.1)).unwrap() - 0.1).abs() < 1e-12);
        assert!(matches!(
            relative_discrepancy(&DMatrix::zeros(2, 2), &z),
            Err(Error::ZeroReference)
        ));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 4, 6);
        let b = random_matrix(&mut rng, 4, 6);
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..4 {
            for j in 0..6 {
                num += (a[(i, j)] - b[(i, j)]).powi(2);
                den += a[(i, j)].powi(2);
            }
        }
        let expected = (num / den).sqrt();
        assert!((relative_discrepancy(&a, &b).unwrap() - expected).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn relu_idempotent_and_homogeneous(
            vals in proptest::collection::vec(-1e3f64..1e3, 6),
            alpha in 1e-3f64..1e3,
        ) {
            let z = DMatrix::from_vec(2, 3, vals);
            let r = relu(&z);
            prop_assert_eq!(relu(&r), r.clone());
            let lhs = relu(&(&z * alpha));
            let rhs = r * alpha;
            prop_assert!((lhs - rhs).amax() <= 1e-12 * (1.0 + alpha * 1e3));
        }

        #[test]
        fn sparsity_ratio_monotone_in_tolerance(
            vals in proptest::collection::vec(-1.0f64..1.0, 12),
            t1 in 0.0f64..1.0,
            t2 in 0.0f64..1.0,
        ) {
            let w = DMatrix::from_vec(3, 4, vals);
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(sparsity_ratio(&w, hi) <= sparsity_ratio(&w, lo));
        }

        #[test]
        fn normalized_forward_is_finite_and_nonnegative(seed in 0u64..1000) {
            let net = random_net(seed, &[3, 5, 4], false);
            let (normed, _) = link_normalize(&net).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_matrix(&mut rng, 3, 8) * 10.0;
            let stack = forward(&normed, &x).unwrap();
            for y in &stack.levels()[1..] {
                prop_assert!(y.iter().all(|v| v.is_finite() && *v >= 0.0));
            }
        }
    }
}
