//! Nested-spiral data and a small softmax SGD trainer.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::model::{forward, NetworkModel, WeightMatrix};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpiralConfig {
    pub points_per_class: usize,
    pub turns: f64,
    /// `a` in `r = a * theta`.
    pub radial_scale: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SpiralConfig {
    fn default() -> Self {
        Self {
            points_per_class: 200,
            turns: 2.0,
            radial_scale: 0.1,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SpiralConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points_per_class == 0 {
            return Err(Error::InvalidArgument("points per class must be at least 1".into()));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::InvalidArgument(format!("noise std must be nonnegative, got {}", self.noise)));
        }
        if !self.turns.is_finite() || self.turns < 0.0 || !self.radial_scale.is_finite() {
            return Err(Error::InvalidArgument("turns and radial scale must be finite".into()));
        }
        Ok(())
    }
}

/// Two interleaved spirals: class 0 first, then class 1 (class 0 rotated by pi).
/// Angles are evenly spaced over `[0.5, 0.5 + 2 pi turns]`.
pub fn gen_spirals(cfg: &SpiralConfig) -> Result<(DMatrix<f64>, Vec<usize>)> {
    cfg.validate()?;
    let n = cfg.points_per_class;
    let span = cfg.turns * 2.0 * PI;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = DMatrix::zeros(2, 2 * n);
    let mut labels = Vec::with_capacity(2 * n);
    for class in 0..2 {
        for i in 0..n {
            let theta = 0.5 + if n > 1 { span * i as f64 / (n - 1) as f64 } else { 0.0 };
            let r = cfg.radial_scale * theta;
            let sign = if class == 0 { 1.0 } else { -1.0 };
            let col = class * n + i;
            for (row, base) in [theta.cos(), theta.sin()].into_iter().enumerate() {
                let e: f64 = rng.sample(StandardNormal);
                x[(row, col)] = sign * r * base + cfg.noise * e;
            }
            labels.push(class);
        }
    }
    Ok((x, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// `N_0, ..., N_L`; `N_0` is the raw input dimension and `N_L` the class count.
    pub widths: Vec<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Soft-threshold weight applied after every step; 0 disables.
    pub l1: f64,
    /// Append a constant input row so the first layer is affine.
    pub input_bias: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            widths: vec![2, 50, 50, 2],
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 300,
            batch_size: 16,
            l1: 0.0,
            input_bias: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::InvalidArgument("need at least two positive widths".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(self.l1 >= 0.0) {
            return Err(Error::InvalidArgument("l1 weight must be nonnegative".into()));
        }
        Ok(())
    }
}

/// He-normal initialization; the bias row starts at zero.
pub fn init_network(cfg: &TrainConfig) -> Result<NetworkModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut layers = Vec::with_capacity(cfg.widths.len() - 1);
    for l in 0..cfg.widths.len() - 1 {
        let fan_in = cfg.widths[l];
        let rows = fan_in + usize::from(l == 0 && cfg.input_bias);
        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let w = DMatrix::from_fn(rows, cfg.widths[l + 1], |i, _| {
            let v: f64 = rng.sample(dist);
            if i >= fan_in { 0.0 } else { v }
        });
        layers.push(WeightMatrix::new(w)?);
    }
    Ok(NetworkModel::new(layers, true)?.with_input_bias(cfg.input_bias))
}

fn check_labels(net: &NetworkModel, x: &DMatrix<f64>, labels: &[usize]) -> Result<()> {
    if labels.len() != x.ncols() {
        return Err(Error::Dimension(format!("{} labels for {} samples", labels.len(), x.ncols())));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= net.output_dim()) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {} outputs",
            net.output_dim()
        )));
    }
    Ok(())
}

/// Mean softmax cross-entropy and its gradient with respect to every layer.
pub fn loss_and_gradients(net: &NetworkModel, x: &DMatrix<f64>, labels: &[usize]) -> Result<(f64, Vec<DMatrix<f64>>)> {
    check_labels(net, x, labels)?;
    let sig = forward(net, x)?;
    let p = x.ncols() as f64;
    let out = sig.output();
    let mut delta = DMatrix::zeros(out.nrows(), out.ncols());
    let mut loss = 0.0;
    for (j, &c) in labels.iter().enumerate() {
        let col = out.column(j);
        let mx = col.max();
        let lse = mx + col.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        loss += lse - col[c];
        for k in 0..col.len() {
            delta[(k, j)] = ((col[k] - lse).exp() - f64::from(k == c)) / p;
        }
    }
    let nl = net.num_layers();
    let mut grads = vec![DMatrix::zeros(0, 0); nl];
    for l in (0..nl).rev() {
        if net.is_relu_layer(l) {
            let y = sig.level(l + 1);
            delta.zip_apply(y, |d, v| {
                if v <= 0.0 {
                    *d = 0.0;
                }
            });
        }
        grads[l] = sig.level(l) * delta.transpose();
        if l > 0 {
            delta = net.layer(l).as_matrix() * &delta;
        }
    }
    Ok((loss / p, grads))
}

pub fn mean_loss(net: &NetworkModel, x: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    check_labels(net, x, labels)?;
    let sig = forward(net, x)?;
    let out = sig.output();
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            let col = out.column(j);
            let mx = col.max();
            mx + col.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() - col[c]
        })
        .sum();
    Ok(total / x.ncols() as f64)
}

/// Arg-max class per sample.
pub fn predict(net: &NetworkModel, x: &DMatrix<f64>) -> Result<Vec<usize>> {
    let sig = forward(net, x)?;
    Ok(argmax_columns(sig.output()))
}

pub fn argmax_columns(z: &DMatrix<f64>) -> Vec<usize> {
    z.column_iter().map(|c| c.argmax().0).collect()
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub net: NetworkModel,
    /// Full-data loss after each epoch.
    pub losses: Vec<f64>,
}

pub fn train_mlp(x: &DMatrix<f64>, labels: &[usize], cfg: &TrainConfig) -> Result<NetworkModel> {
    Ok(train_with_history(x, labels, cfg)?.net)
}

/// Minibatch momentum SGD on mean softmax cross-entropy.
pub fn train_with_history(x: &DMatrix<f64>, labels: &[usize], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let init = init_network(cfg)?;
    if x.nrows() != cfg.widths[0] {
        return Err(Error::Dimension(format!("input has {} rows, widths start at {}", x.nrows(), cfg.widths[0])));
    }
    check_labels(&init, x, labels)?;
    // the trainer's own stream, separate from initialization
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut weights: Vec<DMatrix<f64>> = init.layers().iter().map(|w| w.as_matrix().clone()).collect();
    let mut velocity: Vec<DMatrix<f64>> = weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect();
    let mut order: Vec<usize> = (0..x.ncols()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut net = init;
    let shrink = cfg.learning_rate * cfg.l1;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let xb = x.select_columns(batch);
            let lb: Vec<usize> = batch.iter().map(|&j| labels[j]).collect();
            let (_, grads) = loss_and_gradients(&net, &xb, &lb)?;
            for ((w, v), g) in weights.iter_mut().zip(&mut velocity).zip(&grads) {
                *v *= cfg.momentum;
                *v -= g * cfg.learning_rate;
                *w += &*v;
                if shrink > 0.0 {
                    w.apply(|t| *t = t.signum() * (t.abs() - shrink).max(0.0));
                }
            }
            // non-finite weights are rejected by WeightMatrix
            let layers = weights
                .iter()
                .cloned()
                .map(WeightMatrix::new)
                .collect::<Result<_>>()
                .map_err(|_| Error::Diverged { epoch })?;
            net = net.with_layers(layers)?;
        }
        let loss = mean_loss(&net, x, labels)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        losses.push(loss);
    }
    Ok(TrainOutcome { net, losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(widths: Vec<usize>, epochs: usize) -> TrainConfig {
        TrainConfig { widths, epochs, ..Default::default() }
    }

    #[test]
    fn single_point_classes_are_antipodal() {
        let cfg = SpiralConfig { points_per_class: 1, noise: 0.0, ..Default::default() };
        let (x, labels) = gen_spirals(&cfg).unwrap();
        assert_eq!(labels, vec![0, 1]);
        assert_eq!(x[(0, 1)], -x[(0, 0)]);
        assert_eq!(x[(1, 1)], -x[(1, 0)]);
        assert!((x[(0, 0)] - 0.1 * 0.5 * 0.5f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn spirals_reproducible() {
        let cfg = SpiralConfig { points_per_class: 30, seed: 4, ..Default::default() };
        assert_eq!(gen_spirals(&cfg).unwrap(), gen_spirals(&cfg).unwrap());
        let other = SpiralConfig { seed: 5, ..cfg.clone() };
        assert_ne!(gen_spirals(&cfg).unwrap().0, gen_spirals(&other).unwrap().0);
    }

    #[test]
    fn noisy_points_sit_near_their_own_arm() {
        let cfg = SpiralConfig { points_per_class: 100, noise: 0.05, seed: 1, ..Default::default() };
        let (noisy, labels) = gen_spirals(&cfg).unwrap();
        let (clean, clean_labels) = gen_spirals(&SpiralConfig { noise: 0.0, ..cfg }).unwrap();
        let mut hits = 0;
        for (point, &label) in noisy.column_iter().zip(&labels) {
            let mut best = (f64::INFINITY, 0);
            for (anchor, &anchor_label) in clean.column_iter().zip(&clean_labels) {
                let d = (point - anchor).norm_squared();
                if d < best.0 {
                    best = (d, anchor_label);
                }
            }
            hits += usize::from(best.1 == label);
        }
        assert!(hits as f64 / noisy.ncols() as f64 >= 0.95, "{hits}");
    }

    #[test]
    fn invalid_configs() {
        assert!(gen_spirals(&SpiralConfig { points_per_class: 0, ..Default::default() }).is_err());
        assert!(gen_spirals(&SpiralConfig { noise: -1.0, ..Default::default() }).is_err());
        assert!(init_network(&TrainConfig { learning_rate: 0.0, ..Default::default() }).is_err());
        assert!(init_network(&TrainConfig { widths: vec![2], ..Default::default() }).is_err());
        assert!(init_network(&TrainConfig { widths: vec![2, 0, 2], ..Default::default() }).is_err());
    }

    #[test]
    fn gradients_match_central_differences() {
        let (x, labels) = gen_spirals(&SpiralConfig { points_per_class: 10, seed: 2, ..Default::default() }).unwrap();
        let mut cfg = small_cfg(vec![2, 5, 2], 0);
        cfg.seed = 3;
        let net = init_network(&cfg).unwrap();
        // move the bias row off zero so every weight is exercised
        let mut layers: Vec<DMatrix<f64>> = net.layers().iter().map(|w| w.as_matrix().clone()).collect();
        for j in 0..5 {
            layers[0][(2, j)] = 0.1 * (j as f64 - 2.0);
        }
        let net = net
            .with_layers(layers.iter().cloned().map(|m| WeightMatrix::new(m).unwrap()).collect())
            .unwrap();
        let (_, grads) = loss_and_gradients(&net, &x, &labels).unwrap();
        let h = 1e-5;
        for l in 0..layers.len() {
            for idx in 0..layers[l].len() {
                let eval = |delta: f64| {
                    let mut ws = layers.clone();
                    ws[l][idx] += delta;
                    let n = net.with_layers(ws.into_iter().map(|m| WeightMatrix::new(m).unwrap()).collect()).unwrap();
                    mean_loss(&n, &x, &labels).unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let g = grads[l][idx];
                let scale = g.abs().max(fd.abs()).max(1e-4);
                assert!((g - fd).abs() <= 1e-4 * scale, "layer {l} entry {idx}: {g} vs {fd}");
            }
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (x, labels) = gen_spirals(&SpiralConfig { points_per_class: 5, ..Default::default() }).unwrap();
        let cfg = small_cfg(vec![2, 4, 2], 0);
        assert_eq!(train_mlp(&x, &labels, &cfg).unwrap(), init_network(&cfg).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let (x, labels) = gen_spirals(&SpiralConfig { points_per_class: 20, ..Default::default() }).unwrap();
        let cfg = small_cfg(vec![2, 8, 2], 5);
        assert_eq!(train_mlp(&x, &labels, &cfg).unwrap(), train_mlp(&x, &labels, &cfg).unwrap());
    }

    #[test]
    fn divergence_is_reported() {
        let (x, labels) = gen_spirals(&SpiralConfig { points_per_class: 20, ..Default::default() }).unwrap();
        let x = x * 1e200;
        let cfg = TrainConfig { learning_rate: 1e100, momentum: 0.0, ..small_cfg(vec![2, 8, 2], 3) };
        assert!(matches!(train_mlp(&x, &labels, &cfg), Err(Error::Diverged { .. })));
    }

    #[test]
    fn label_validation() {
        let (x, _) = gen_spirals(&SpiralConfig { points_per_class: 2, ..Default::default() }).unwrap();
        let cfg = small_cfg(vec![2, 3, 2], 1);
        assert!(train_mlp(&x, &[0, 1, 2, 0], &cfg).is_err());
        assert!(train_mlp(&x, &[0, 1], &cfg).is_err());
    }

    #[test]
    fn l1_shrinkage_sparsifies() {
        let (x, labels) = gen_spirals(&SpiralConfig { points_per_class: 40, ..Default::default() }).unwrap();
        let dense = train_mlp(&x, &labels, &small_cfg(vec![2, 20, 2], 20)).unwrap();
        let sparse = train_mlp(&x, &labels, &TrainConfig { l1: 0.05, ..small_cfg(vec![2, 20, 2], 20) }).unwrap();
        assert!(sparse.total_nnz(0.0) < dense.total_nnz(0.0));
    }

    #[test]
    fn trained_net_has_exact_relu_zeros() {
        let (x, labels) = gen_spirals(&SpiralConfig { points_per_class: 30, ..Default::default() }).unwrap();
        let net = train_mlp(&x, &labels, &small_cfg(vec![2, 10, 10, 2], 10)).unwrap();
        let sig = forward(&net, &x).unwrap();
        assert_eq!(sig.output().shape(), (2, 60));
        assert!(sig.level(1).iter().any(|&v| v == 0.0));
        assert!(sig.level(1).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn moving_average_loss_decreases() {
        let (x, labels) = gen_spirals(&SpiralConfig { points_per_class: 50, seed: 7, ..Default::default() }).unwrap();
        let cfg = TrainConfig { learning_rate: 0.02, ..small_cfg(vec![2, 20, 20, 2], 60) };
        let out = train_with_history(&x, &labels, &cfg).unwrap();
        let blocks: Vec<f64> = out.losses.chunks(5).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        for pair in blocks.windows(2) {
            assert!(pair[1] <= pair[0] * 1.02, "{blocks:?}");
        }
    }
}
