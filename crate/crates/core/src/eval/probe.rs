use log::warn;
use ndarray::{Array1, Array2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::metrics::accuracy;
use crate::data::FeatureSet;
use crate::error::{invalid, Result};
use crate::linalg::{self, Matrix};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub learning_rate: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            tolerance: 1e-6,
            max_iterations: 5000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub train_acc: f64,
    pub test_acc: f64,
    pub iterations: usize,
    pub final_loss: f64,
    pub converged: bool,
    /// Feature columns with (near) zero variance on the training set.
    pub degenerate_columns: Vec<usize>,
}

/// Trains a softmax-regression classifier on frozen, standardized features
/// with full-batch gradient descent until the loss changes by less than
/// `tolerance`, then reports accuracy on both splits.
pub fn linear_probe(train: &FeatureSet, test: &FeatureSet, opts: &ProbeOptions) -> Result<ProbeReport> {
    let (n, d) = train.features.dim();
    if n == 0 || n != train.labels.len() || test.features.nrows() != test.labels.len() {
        invalid!("feature and label counts disagree");
    }
    if test.features.ncols() != d {
        invalid!("train features have width {d}, test features {}", test.features.ncols());
    }
    let k = train.num_classes.max(test.num_classes);
    let mean = train.features.mean_axis(Axis(0)).expect("non-empty");
    let std = train.features.std_axis(Axis(0), 0.0);
    let degenerate_columns: Vec<usize> = std.iter().enumerate().filter(|(_, &s)| s < 1e-12).map(|(i, _)| i).collect();
    if !degenerate_columns.is_empty() {
        warn!(
            "{} of {d} feature columns have zero variance; they are centered but not scaled",
            degenerate_columns.len()
        );
    }
    let scale = std.mapv(|s| if s < 1e-12 { 1.0 } else { s });
    let standardize = |f: &Matrix| (f - &mean) / &scale;
    let xtr = standardize(&train.features);
    let xte = standardize(&test.features);

    let mut rng = seed::stream(opts.seed, seed::PROBE, 0);
    let init = Normal::new(0.0, 0.01).expect("valid std");
    let mut w: Matrix = Array2::from_shape_simple_fn((d, k), || init.sample(&mut rng));
    let mut b: Array1<f64> = Array1::zeros(k);
    let mut onehot = Array2::zeros((n, k));
    for (i, &y) in train.labels.iter().enumerate() {
        onehot[[i, y]] = 1.0;
    }

    let loss_and_grad = |w: &Matrix, b: &Array1<f64>| {
        let z = xtr.dot(w) + b;
        let logp = linalg::log_softmax_rows(&z.view(), 1.0);
        let loss = -(&logp * &onehot).sum() / n as f64;
        let g = (logp.mapv(f64::exp) - &onehot) / n as f64;
        (loss, xtr.t().dot(&g), g.sum_axis(Axis(0)))
    };
    let (mut prev, mut gw, mut gb) = loss_and_grad(&w, &b);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iterations {
        w.scaled_add(-opts.learning_rate, &gw);
        b.scaled_add(-opts.learning_rate, &gb);
        iterations += 1;
        let (loss, nw, nb) = loss_and_grad(&w, &b);
        (gw, gb) = (nw, nb);
        let delta = (prev - loss).abs();
        prev = loss;
        if delta < opts.tolerance {
            converged = true;
            break;
        }
    }
    Ok(ProbeReport {
        train_acc: accuracy(&(xtr.dot(&w) + &b), &train.labels)?,
        test_acc: accuracy(&(xte.dot(&w) + &b), &test.labels)?,
        iterations,
        final_loss: prev,
        converged,
        degenerate_columns,
    })
}
