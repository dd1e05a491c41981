//! Small dense helpers shared by the graph, encoder and loss code.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

pub type Matrix = Array2<f64>;

/// Rows with a Euclidean norm below this are treated as zero.
pub const ZERO_ROW_EPS: f64 = 1e-12;

/// Tolerance used when checking the unit-norm contract of embeddings and banks.
pub const UNIT_NORM_TOL: f64 = 1e-6;

pub fn row_norms(m: &ArrayView2<'_, f64>) -> Array1<f64> {
    m.map_axis(Axis(1), |r| r.dot(&r).sqrt())
}

/// Row-wise L2 normalization.
///
/// Returns the normalized matrix, the original norms and the indices of rows
/// that were left untouched because their norm fell below [`ZERO_ROW_EPS`].
pub fn normalize_rows(m: &ArrayView2<'_, f64>) -> (Matrix, Array1<f64>, Vec<usize>) {
    let norms = row_norms(m);
    let mut out = m.to_owned();
    let mut degenerate = Vec::new();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let n = norms[i];
        if n < ZERO_ROW_EPS {
            degenerate.push(i);
        } else {
            row /= n;
        }
    }
    (out, norms, degenerate)
}

/// Backward pass of [`normalize_rows`]: given the normalized output `y`, the
/// original norms and the upstream gradient, returns the gradient w.r.t. the
/// unnormalized input. Degenerate rows pass the gradient through unchanged.
pub fn normalize_rows_backward(y: &Matrix, norms: &Array1<f64>, grad_y: &Matrix) -> Matrix {
    let mut grad_x = grad_y.clone();
    for i in 0..y.nrows() {
        let n = norms[i];
        if n < ZERO_ROW_EPS {
            continue;
        }
        let yi = y.row(i);
        let proj = yi.dot(&grad_y.row(i));
        let mut gx = grad_x.row_mut(i);
        gx.scaled_add(-proj, &yi);
        gx /= n;
    }
    grad_x
}

pub fn normalize_vector(v: &ArrayView1<'_, f64>) -> Option<Array1<f64>> {
    let n = v.dot(v).sqrt();
    if n < ZERO_ROW_EPS {
        None
    } else {
        Some(v.mapv(|x| x / n))
    }
}

/// Numerically stable log-sum-exp of a slice.
pub fn log_sum_exp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.into_iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Row-wise log-softmax of `logits / temperature`.
pub fn log_softmax_rows(logits: &ArrayView2<'_, f64>, temperature: f64) -> Matrix {
    let mut out = logits.mapv(|z| z / temperature);
    for mut row in out.axis_iter_mut(Axis(0)) {
        let lse = log_sum_exp(row.iter().copied());
        row.mapv_inplace(|z| z - lse);
    }
    out
}

pub fn is_symmetric(m: &Matrix, tol: f64) -> bool {
    m.is_square()
        && (0..m.nrows()).all(|i| (i + 1..m.ncols()).all(|j| (m[[i, j]] - m[[j, i]]).abs() <= tol))
}

pub fn frobenius_distance(a: &Matrix, b: &Matrix) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Pairwise cosine-similarity matrix of the rows of `m`. Zero rows get
/// similarity 0 with everything, including themselves.
pub fn cosine_similarity_matrix(m: &ArrayView2<'_, f64>) -> Matrix {
    let (normed, _, degenerate) = normalize_rows(m);
    let mut sim = normed.dot(&normed.t());
    for &i in &degenerate {
        sim.row_mut(i).fill(0.0);
        sim.column_mut(i).fill(0.0);
    }
    sim
}
