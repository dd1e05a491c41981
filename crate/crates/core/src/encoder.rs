//! Holistic embeddings via topology-adaptive graph convolution.
//!
//! `H = normalize_rows( Σ_{l=0..L} Â^l F Θ_l )` where `Â` is the symmetrically
//! normalized batch adjacency. Rows are L2-normalized so cosine similarity in
//! the contrastive losses is a plain dot product.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{self, Matrix, UNIT_NORM_TOL};

/// Per-hop weight matrices `Θ_0 … Θ_L`, each `d × g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderWeights {
    pub hops: Vec<Matrix>,
    pub trainable: bool,
}

impl EncoderWeights {
    pub fn new(hops: Vec<Matrix>) -> Result<Self> {
        let w = Self {
            hops,
            trainable: true,
        };
        w.validate()?;
        Ok(w)
    }

    /// Uniform initialization in `±1/√d`, one matrix per hop `0..=num_hops`.
    pub fn random<R: Rng + ?Sized>(
        input_dim: usize,
        output_dim: usize,
        num_hops: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (input_dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let hops = (0..=num_hops)
            .map(|_| Array2::from_shape_simple_fn((input_dim, output_dim), || dist.sample(rng)))
            .collect();
        Self {
            hops,
            trainable: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.hops.first() else {
            invalid!("encoder needs at least one hop weight matrix");
        };
        let dims = first.dim();
        for (l, w) in self.hops.iter().enumerate() {
            if w.dim() != dims {
                invalid!("hop {l} weight is {:?}, expected {:?}", w.dim(), dims);
            }
            if w.iter().any(|v| !v.is_finite()) {
                invalid!("hop {l} weight has non-finite entries");
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.hops[0].nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.hops[0].ncols()
    }

    /// `L`, the highest hop power.
    pub fn max_hop(&self) -> usize {
        self.hops.len() - 1
    }

    pub fn zeros_like(&self) -> Vec<Matrix> {
        self.hops.iter().map(|w| Array2::zeros(w.dim())).collect()
    }
}

/// Rows of graph-based representations, one per instance.
#[derive(Debug, Clone, PartialEq)]
pub struct HolisticEmbedding {
    pub vectors: Matrix,
    pub normalized: bool,
    /// Rows whose norm was below the zero-row guard and were left as is.
    pub degenerate_rows: Vec<usize>,
}

impl HolisticEmbedding {
    pub fn from_normalized(vectors: Matrix) -> Self {
        Self {
            vectors,
            normalized: true,
            degenerate_rows: Vec::new(),
        }
    }

    /// Normalizes `raw` row-wise, flagging zero rows.
    pub fn normalize(raw: &Matrix) -> Self {
        let (vectors, _, degenerate_rows) = linalg::normalize_rows(&raw.view());
        Self {
            vectors,
            normalized: true,
            degenerate_rows,
        }
    }

    pub fn rows(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn width(&self) -> usize {
        self.vectors.ncols()
    }

    /// Checks the unit-norm contract (flagged zero rows are exempt).
    pub fn check_normalized(&self, what: &str) -> Result<()> {
        if !self.normalized {
            invalid!("{what} embedding is not row-normalized");
        }
        for (i, row) in self.vectors.axis_iter(Axis(0)).enumerate() {
            let n = row.dot(&row).sqrt();
            if (n - 1.0).abs() > UNIT_NORM_TOL && !self.degenerate_rows.contains(&i) {
                invalid!("{what} embedding row {i} has norm {n}, expected 1");
            }
        }
        Ok(())
    }
}

/// Intermediates kept by [`tagcn_forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct TagcnCache {
    /// `Â^l F` for `l = 0..=L`.
    powers: Vec<Matrix>,
    norms: Array1<f64>,
    pub output: HolisticEmbedding,
}

/// Gradients of a scalar loss w.r.t. the encoder inputs.
#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub hops: Vec<Matrix>,
    pub features: Matrix,
}

fn check_dims(normalized_adjacency: &Matrix, features: &Matrix, weights: &EncoderWeights, num_hops: usize) -> Result<()> {
    weights.validate()?;
    let b = features.nrows();
    if normalized_adjacency.dim() != (b, b) {
        invalid!(
            "adjacency is {:?} but there are {b} feature rows",
            normalized_adjacency.dim()
        );
    }
    if features.ncols() != weights.input_dim() {
        invalid!(
            "feature width {} does not match weight input width {}",
            features.ncols(),
            weights.input_dim()
        );
    }
    if weights.hops.len() < num_hops + 1 {
        invalid!(
            "L = {num_hops} needs {} weight matrices, got {}",
            num_hops + 1,
            weights.hops.len()
        );
    }
    Ok(())
}

/// `normalize_rows(Σ_{l=0..L} Â^l F Θ_l)`.
pub fn tagcn_forward(
    normalized_adjacency: &Matrix,
    features: &Matrix,
    weights: &EncoderWeights,
    num_hops: usize,
) -> Result<HolisticEmbedding> {
    Ok(tagcn_forward_cached(normalized_adjacency, features, weights, num_hops)?.output)
}

pub fn tagcn_forward_cached(
    normalized_adjacency: &Matrix,
    features: &Matrix,
    weights: &EncoderWeights,
    num_hops: usize,
) -> Result<TagcnCache> {
    check_dims(normalized_adjacency, features, weights, num_hops)?;
    let mut powers = Vec::with_capacity(num_hops + 1);
    powers.push(features.clone());
    for l in 1..=num_hops {
        let next = normalized_adjacency.dot(&powers[l - 1]);
        powers.push(next);
    }
    let mut z = powers[0].dot(&weights.hops[0]);
    for l in 1..=num_hops {
        z += &powers[l].dot(&weights.hops[l]);
    }
    let (vectors, norms, degenerate_rows) = linalg::normalize_rows(&z.view());
    Ok(TagcnCache {
        powers,
        norms,
        output: HolisticEmbedding {
            vectors,
            normalized: true,
            degenerate_rows,
        },
    })
}

impl TagcnCache {
    pub fn num_hops(&self) -> usize {
        self.powers.len() - 1
    }

    /// Backpropagates `grad_output` (w.r.t. the normalized embedding) into the
    /// hop weights and the node features. Hops beyond the forward `L` get
    /// zero gradients so the result lines up with `weights.hops`.
    pub fn backward(
        &self,
        normalized_adjacency: &Matrix,
        weights: &EncoderWeights,
        grad_output: &Matrix,
    ) -> EncoderGrads {
        let grad_z = linalg::normalize_rows_backward(&self.output.vectors, &self.norms, grad_output);
        let mut hops = weights.zeros_like();
        for (l, p) in self.powers.iter().enumerate() {
            hops[l] = p.t().dot(&grad_z);
        }
        // dF = Σ_l (Â^l)ᵀ dZ Θ_lᵀ, evaluated Horner-style from the top hop down.
        let top = self.num_hops();
        let mut grad_f = grad_z.dot(&weights.hops[top].t());
        for l in (0..top).rev() {
            grad_f = normalized_adjacency.t().dot(&grad_f);
            grad_f += &grad_z.dot(&weights.hops[l].t());
        }
        EncoderGrads {
            hops,
            features: grad_f,
        }
    }
}

/// Parameter-free aggregation used by the pooling ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    Sum,
    Mean,
}

impl FromStr for PoolingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(PoolingMode::Sum),
            "mean" => Ok(PoolingMode::Mean),
            other => Err(Error::InvalidArgument(format!(
                "unknown pooling mode `{other}` (expected sum or mean)"
            ))),
        }
    }
}

impl fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolingMode::Sum => "sum",
            PoolingMode::Mean => "mean",
        })
    }
}

#[derive(Debug, Clone)]
pub struct PoolingCache {
    mode: PoolingMode,
    degrees: Array1<f64>,
    norms: Array1<f64>,
    pub output: HolisticEmbedding,
}

/// Neighborhood aggregation over the binary adjacency.
///
/// Sum mode returns `normalize_rows(A F)`; mean mode returns `D⁻¹ A F`
/// without normalization (the caller projects it).
pub fn pooling_forward(adjacency: &Matrix, features: &Matrix, mode: PoolingMode) -> Result<HolisticEmbedding> {
    Ok(pooling_forward_cached(adjacency, features, mode)?.output)
}

pub fn pooling_forward_cached(adjacency: &Matrix, features: &Matrix, mode: PoolingMode) -> Result<PoolingCache> {
    let b = features.nrows();
    if adjacency.dim() != (b, b) {
        invalid!("adjacency is {:?} but there are {b} feature rows", adjacency.dim());
    }
    let degrees = adjacency.sum_axis(Axis(1));
    let aggregate = adjacency.dot(features);
    match mode {
        PoolingMode::Sum => {
            let (vectors, norms, degenerate_rows) = linalg::normalize_rows(&aggregate.view());
            Ok(PoolingCache {
                mode,
                degrees,
                norms,
                output: HolisticEmbedding {
                    vectors,
                    normalized: true,
                    degenerate_rows,
                },
            })
        }
        PoolingMode::Mean => {
            if let Some(i) = degrees.iter().position(|&d| d <= 0.0) {
                invalid!("node {i} has zero degree; mean pooling is undefined");
            }
            let mut vectors = aggregate;
            for (mut row, &d) in vectors.axis_iter_mut(Axis(0)).zip(degrees.iter()) {
                row /= d;
            }
            Ok(PoolingCache {
                mode,
                degrees,
                norms: Array1::zeros(0),
                output: HolisticEmbedding {
                    vectors,
                    normalized: false,
                    degenerate_rows: Vec::new(),
                },
            })
        }
    }
}

impl PoolingCache {
    /// Gradient w.r.t. the node features.
    pub fn backward(&self, adjacency: &Matrix, grad_output: &Matrix) -> Matrix {
        match self.mode {
            PoolingMode::Sum => {
                let g = linalg::normalize_rows_backward(&self.output.vectors, &self.norms, grad_output);
                adjacency.t().dot(&g)
            }
            PoolingMode::Mean => {
                let mut g = grad_output.clone();
                for (mut row, &d) in g.axis_iter_mut(Axis(0)).zip(self.degrees.iter()) {
                    row /= d;
                }
                adjacency.t().dot(&g)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProjectionCache {
    inputs: Matrix,
    norms: Array1<f64>,
    pub output: HolisticEmbedding,
}

/// `normalize_rows(F Θ_0)`: maps raw features into the shared embedding
/// space. Identical to [`tagcn_forward`] with `L = 0`.
pub fn project_features(features: &Matrix, weights: &EncoderWeights) -> Result<HolisticEmbedding> {
    Ok(project_features_cached(features, weights)?.output)
}

pub fn project_features_cached(features: &Matrix, weights: &EncoderWeights) -> Result<ProjectionCache> {
    weights.validate()?;
    if features.ncols() != weights.input_dim() {
        invalid!(
            "feature width {} does not match weight input width {}",
            features.ncols(),
            weights.input_dim()
        );
    }
    let z = features.dot(&weights.hops[0]);
    let (vectors, norms, degenerate_rows) = linalg::normalize_rows(&z.view());
    Ok(ProjectionCache {
        inputs: features.clone(),
        norms,
        output: HolisticEmbedding {
            vectors,
            normalized: true,
            degenerate_rows,
        },
    })
}

impl ProjectionCache {
    /// Returns `(dΘ_0, dF)`.
    pub fn backward(&self, weights: &EncoderWeights, grad_output: &Matrix) -> (Matrix, Matrix) {
        let grad_z = linalg::normalize_rows_backward(&self.output.vectors, &self.norms, grad_output);
        (self.inputs.t().dot(&grad_z), grad_z.dot(&weights.hops[0].t()))
    }
}
