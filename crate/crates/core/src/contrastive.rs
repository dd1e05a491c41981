//! Mutual-information objectives between teacher and student embeddings.
//!
//! All losses here return gradients w.r.t. their embedding inputs so the
//! trainer can chain them into the encoder and backbone backward passes.
//! Similarities are dot products of unit rows divided by the contrast
//! temperature `τ_c`; `τ_c = 1` gives the plain cosine form.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array1, Array2, Axis};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderWeights, HolisticEmbedding};
use crate::error::{invalid, Result};
use crate::linalg::{self, log_sum_exp, Matrix, UNIT_NORM_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankOwner {
    Teacher,
    Student,
}

impl fmt::Display for BankOwner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BankOwner::Teacher => "teacher",
            BankOwner::Student => "student",
        })
    }
}

/// One unit-norm feature vector per training instance, refreshed by momentum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    entries: Matrix,
    momentum: f64,
    owner: BankOwner,
}

impl MemoryBank {
    pub fn new(entries: Matrix, momentum: f64, owner: BankOwner) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            invalid!("bank momentum must lie in [0, 1], got {momentum}");
        }
        for (i, row) in entries.axis_iter(Axis(0)).enumerate() {
            let n = row.dot(&row).sqrt();
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                invalid!("{owner} bank row {i} has norm {n}, expected 1");
            }
        }
        Ok(Self {
            entries,
            momentum,
            owner,
        })
    }

    /// Random unit vectors (normalized Gaussians).
    pub fn random<R: Rng + ?Sized>(
        len: usize,
        dim: usize,
        momentum: f64,
        owner: BankOwner,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 {
            invalid!("bank dimension must be positive");
        }
        let mut entries: Matrix = Array2::zeros((len, dim));
        for mut row in entries.axis_iter_mut(Axis(0)) {
            loop {
                row.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
                let n = row.dot(&row).sqrt();
                if n > 1e-6 {
                    row /= n;
                    break;
                }
            }
        }
        Self::new(entries, momentum, owner)
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn owner(&self) -> BankOwner {
        self.owner
    }

    pub fn entries(&self) -> &Matrix {
        &self.entries
    }

    /// `entry_i ← normalize(m·entry_i + (1−m)·normalize(new_i))` for every
    /// batch index. A zero new feature leaves its entry untouched.
    pub fn update(&mut self, batch_indices: &[usize], new_features: &Matrix) -> Result<()> {
        if batch_indices.len() != new_features.nrows() {
            invalid!(
                "{} indices but {} feature rows",
                batch_indices.len(),
                new_features.nrows()
            );
        }
        if new_features.ncols() != self.dim() {
            invalid!(
                "feature width {} does not match bank width {}",
                new_features.ncols(),
                self.dim()
            );
        }
        if let Some(&i) = batch_indices.iter().find(|&&i| i >= self.len()) {
            invalid!("batch index {i} out of range for a bank of {}", self.len());
        }
        if new_features.iter().any(|v| !v.is_finite()) {
            invalid!("new bank features contain non-finite values");
        }
        let m = self.momentum;
        for (&idx, new) in batch_indices.iter().zip(new_features.axis_iter(Axis(0))) {
            let Some(unit) = linalg::normalize_vector(&new) else {
                continue;
            };
            let mut mixed = self.entries.row(idx).mapv(|v| m * v);
            mixed.scaled_add(1.0 - m, &unit);
            // Opposite old and new vectors under m = 0.5 cancel; keep the new one.
            let next = linalg::normalize_vector(&mixed.view()).unwrap_or(unit);
            self.entries.row_mut(idx).assign(&next);
        }
        Ok(())
    }
}

/// Functional form of [`MemoryBank::update`].
pub fn bank_update(mut bank: MemoryBank, batch_indices: &[usize], new_features: &Matrix) -> Result<MemoryBank> {
    bank.update(batch_indices, new_features)?;
    Ok(bank)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatchResult {
    pub loss: f64,
    /// Cosine similarity of each positive pair.
    pub positive_similarities: Array1<f64>,
    pub mi_lower_bound_estimate: f64,
    /// Per-anchor bound terms (in-batch: `log[e^{s_ii}/((1/b)Σ_j e^{s_ij})]`;
    /// bank: mean of the two directional log ratios).
    pub per_anchor_bounds: Array1<f64>,
}

/// Gradients w.r.t. the teacher and student embedding matrices.
#[derive(Debug, Clone)]
pub struct PairGrads {
    pub teacher: Matrix,
    pub student: Matrix,
}

fn check_pair(teacher: &HolisticEmbedding, student: &HolisticEmbedding, tau: f64) -> Result<()> {
    if teacher.rows() == 0 {
        invalid!("empty batch");
    }
    if teacher.vectors.dim() != student.vectors.dim() {
        invalid!(
            "teacher embedding is {:?} but student embedding is {:?}",
            teacher.vectors.dim(),
            student.vectors.dim()
        );
    }
    if !(tau > 0.0) || !tau.is_finite() {
        invalid!("contrast temperature must be positive, got {tau}");
    }
    teacher.check_normalized("teacher")?;
    student.check_normalized("student")?;
    Ok(())
}

fn positive_similarities(t: &Matrix, s: &Matrix) -> Array1<f64> {
    Array1::from_iter(t.outer_iter().zip(s.outer_iter()).map(|(a, b)| a.dot(&b)))
}

/// In-batch InfoNCE with the averaged denominator:
/// `loss = −(1/b) Σ_i log[ e^{s_ii/τ} / ((1/b) Σ_j e^{s_ij/τ}) ]`, `s_ij = t_i · u_j`.
pub fn infonce_in_batch(teacher: &HolisticEmbedding, student: &HolisticEmbedding, tau: f64) -> Result<ContrastiveBatchResult> {
    Ok(infonce_in_batch_with_grad(teacher, student, tau)?.0)
}

pub fn infonce_in_batch_with_grad(
    teacher: &HolisticEmbedding,
    student: &HolisticEmbedding,
    tau: f64,
) -> Result<(ContrastiveBatchResult, PairGrads)> {
    check_pair(teacher, student, tau)?;
    let t = &teacher.vectors;
    let s = &student.vectors;
    let b = t.nrows();
    let logits = t.dot(&s.t()) / tau;
    let log_b = (b as f64).ln();
    let mut bounds = Array1::zeros(b);
    let mut grad_logits = Array2::zeros((b, b));
    for i in 0..b {
        let row = logits.row(i);
        let lse = log_sum_exp(row.iter().copied());
        bounds[i] = row[i] - lse + log_b;
        for j in 0..b {
            grad_logits[[i, j]] = (row[j] - lse).exp() / b as f64;
        }
        grad_logits[[i, i]] -= 1.0 / b as f64;
    }
    let mi = bounds.mean().unwrap_or(0.0);
    let grads = PairGrads {
        teacher: grad_logits.dot(s) / tau,
        student: grad_logits.t().dot(t) / tau,
    };
    Ok((
        ContrastiveBatchResult {
            loss: -mi,
            positive_similarities: positive_similarities(t, s),
            mi_lower_bound_estimate: mi,
            per_anchor_bounds: bounds,
        },
        grads,
    ))
}

/// Draws `n_negatives` bank indices per anchor, uniformly without replacement
/// from every index except the anchor's own. Using all `N − 1` candidates
/// enumerates them in order and consumes no randomness.
pub fn sample_negatives<R: Rng + ?Sized>(
    bank_len: usize,
    batch_indices: &[usize],
    n_negatives: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if n_negatives >= bank_len.max(1) {
        invalid!(
            "n_negatives = {n_negatives} must be below the bank size {bank_len}"
        );
    }
    batch_indices
        .iter()
        .map(|&own| {
            if own >= bank_len {
                invalid!("batch index {own} out of range for a bank of {bank_len}");
            }
            let skip_own = |j: usize| if j >= own { j + 1 } else { j };
            Ok(if n_negatives == bank_len - 1 {
                (0..bank_len - 1).map(skip_own).collect()
            } else {
                index::sample(rng, bank_len - 1, n_negatives)
                    .into_iter()
                    .map(skip_own)
                    .collect()
            })
        })
        .collect()
}

/// A memory bank plus the projector that maps its rows into the embedding
/// space. `projector = None` means the rows already live there.
#[derive(Debug, Clone, Copy)]
pub struct BankSide<'a> {
    pub bank: &'a MemoryBank,
    pub projector: Option<&'a EncoderWeights>,
}

#[derive(Debug, Clone)]
pub struct BankContrastOutput {
    pub result: ContrastiveBatchResult,
    pub grads: PairGrads,
    /// Gradient w.r.t. `Θ_0` of the teacher-side projector (teacher bank rows).
    pub teacher_projector: Option<Matrix>,
    /// Gradient w.r.t. `Θ_0` of the student-side projector (student bank rows).
    pub student_projector: Option<Matrix>,
}

/// Projected negatives for one direction: unique bank rows, their local
/// positions, and what is needed to backpropagate into the projector.
struct NegativeRows {
    rows: Matrix,
    local: Vec<Vec<usize>>,
    projection: Option<encoder::ProjectionCache>,
}

fn gather_negatives(side: BankSide<'_>, negatives: &[Vec<usize>], width: usize) -> Result<NegativeRows> {
    let mut position = BTreeMap::new();
    for list in negatives {
        for &j in list {
            position.entry(j).or_insert(0usize);
        }
    }
    for (slot, v) in position.values_mut().enumerate() {
        *v = slot;
    }
    let unique: Vec<usize> = position.keys().copied().collect();
    let raw = side.bank.entries().select(Axis(0), &unique);
    let (rows, projection) = match side.projector {
        Some(w) => {
            if w.input_dim() != side.bank.dim() {
                invalid!(
                    "projector input width {} does not match {} bank width {}",
                    w.input_dim(),
                    side.bank.owner(),
                    side.bank.dim()
                );
            }
            let cache = encoder::project_features_cached(&raw, w)?;
            (cache.output.vectors.clone(), Some(cache))
        }
        None => (raw, None),
    };
    if rows.ncols() != width && !unique.is_empty() {
        invalid!(
            "{} bank rows have width {} but embeddings have width {width}",
            side.bank.owner(),
            rows.ncols()
        );
    }
    let local = negatives
        .iter()
        .map(|list| list.iter().map(|j| position[j]).collect())
        .collect();
    Ok(NegativeRows {
        rows,
        local,
        projection,
    })
}

struct Direction {
    /// `log[e^{pos}/(e^{pos} + Σ e^{neg})]` per anchor.
    terms: Array1<f64>,
    grad_anchor: Matrix,
    grad_positive: Matrix,
    grad_negatives: Matrix,
}

/// One directional term of the approximate objective, divided by `b`
/// and negated so it can be minimized.
fn bank_direction(anchor: &Matrix, positive: &Matrix, negs: &NegativeRows, tau: f64) -> Direction {
    let b = anchor.nrows();
    let scale = 1.0 / b as f64;
    let mut terms = Array1::zeros(b);
    let mut grad_anchor = Array2::zeros(anchor.dim());
    let mut grad_positive = Array2::zeros(positive.dim());
    let mut grad_negatives = Array2::zeros(negs.rows.dim());
    let mut logits = Vec::new();
    for i in 0..b {
        let a = anchor.row(i);
        let pos = a.dot(&positive.row(i)) / tau;
        logits.clear();
        logits.push(pos);
        logits.extend(negs.local[i].iter().map(|&j| a.dot(&negs.rows.row(j)) / tau));
        let lse = log_sum_exp(logits.iter().copied());
        terms[i] = pos - lse;

        // d(−term_i / b) / d logit = (softmax − onehot_pos) / b
        let g_pos = ((pos - lse).exp() - 1.0) * scale / tau;
        grad_anchor.row_mut(i).scaled_add(g_pos, &positive.row(i));
        grad_positive.row_mut(i).scaled_add(g_pos, &a);
        for (k, &j) in negs.local[i].iter().enumerate() {
            let g = (logits[k + 1] - lse).exp() * scale / tau;
            grad_anchor.row_mut(i).scaled_add(g, &negs.rows.row(j));
            grad_negatives.row_mut(j).scaled_add(g, &a);
        }
    }
    Direction {
        terms,
        grad_anchor,
        grad_positive,
        grad_negatives,
    }
}

/// Symmetric memory-bank InfoNCE. Teacher anchors contrast against projected
/// student-bank negatives and student anchors against projected teacher-bank
/// negatives; the loss is the sum of both directions, each averaged over the
/// batch. `negatives[i]` lists the bank rows used for anchor `i` (see
/// [`sample_negatives`]).
pub fn infonce_with_bank(
    teacher: &HolisticEmbedding,
    student: &HolisticEmbedding,
    teacher_side: BankSide<'_>,
    student_side: BankSide<'_>,
    batch_indices: &[usize],
    negatives: &[Vec<usize>],
    tau: f64,
) -> Result<BankContrastOutput> {
    check_pair(teacher, student, tau)?;
    let b = teacher.rows();
    if batch_indices.len() != b || negatives.len() != b {
        invalid!(
            "batch has {b} rows but {} indices and {} negative lists",
            batch_indices.len(),
            negatives.len()
        );
    }
    let n_neg = negatives[0].len();
    for side in [teacher_side, student_side] {
        let len = side.bank.len();
        if let Some(&i) = batch_indices.iter().find(|&&i| i >= len) {
            invalid!("batch index {i} out of range for the {} bank of {len}", side.bank.owner());
        }
        if n_neg >= len {
            invalid!("n_negatives = {n_neg} must be below the bank size {len}");
        }
    }
    for (i, list) in negatives.iter().enumerate() {
        if list.len() != n_neg {
            invalid!("anchor {i} has {} negatives, expected {n_neg}", list.len());
        }
        if list.contains(&batch_indices[i]) {
            invalid!("anchor {i} lists its own bank row as a negative");
        }
        let len = teacher_side.bank.len().min(student_side.bank.len());
        if let Some(&j) = list.iter().find(|&&j| j >= len) {
            invalid!("negative index {j} out of range");
        }
    }

    let g = teacher.width();
    let t = &teacher.vectors;
    let s = &student.vectors;
    let student_negs = gather_negatives(student_side, negatives, g)?;
    let teacher_negs = gather_negatives(teacher_side, negatives, g)?;
    let t_dir = bank_direction(t, s, &student_negs, tau);
    let s_dir = bank_direction(s, t, &teacher_negs, tau);

    let loss = -(t_dir.terms.mean().unwrap() + s_dir.terms.mean().unwrap());
    let bounds = (&t_dir.terms + &s_dir.terms) / 2.0;
    let mi = ((n_neg + 1) as f64).ln() + bounds.mean().unwrap();

    let teacher_projector = match (&teacher_negs.projection, teacher_side.projector) {
        (Some(cache), Some(w)) => Some(cache.backward(w, &s_dir.grad_negatives).0),
        _ => None,
    };
    let student_projector = match (&student_negs.projection, student_side.projector) {
        (Some(cache), Some(w)) => Some(cache.backward(w, &t_dir.grad_negatives).0),
        _ => None,
    };

    Ok(BankContrastOutput {
        result: ContrastiveBatchResult {
            loss,
            positive_similarities: positive_similarities(t, s),
            mi_lower_bound_estimate: mi,
            per_anchor_bounds: bounds,
        },
        grads: PairGrads {
            teacher: t_dir.grad_anchor + s_dir.grad_positive,
            student: s_dir.grad_anchor + t_dir.grad_positive,
        },
        teacher_projector,
        student_projector,
    })
}

/// Ablation: banks hold past graph-based embeddings directly (no projector).
pub fn graph_bank_variant(
    teacher: &HolisticEmbedding,
    student: &HolisticEmbedding,
    teacher_bank: &MemoryBank,
    student_bank: &MemoryBank,
    batch_indices: &[usize],
    negatives: &[Vec<usize>],
    tau: f64,
) -> Result<BankContrastOutput> {
    infonce_with_bank(
        teacher,
        student,
        BankSide {
            bank: teacher_bank,
            projector: None,
        },
        BankSide {
            bank: student_bank,
            projector: None,
        },
        batch_indices,
        negatives,
        tau,
    )
}

fn check_same_shape(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.dim() != b.dim() || a.is_empty() {
        invalid!("shape mismatch: {:?} vs {:?}", a.dim(), b.dim());
    }
    Ok(())
}

/// Mean of squared elementwise differences.
pub fn mse_alignment_loss(teacher: &Matrix, student: &Matrix) -> Result<f64> {
    Ok(mse_alignment_with_grad(teacher, student)?.0)
}

pub fn mse_alignment_with_grad(teacher: &Matrix, student: &Matrix) -> Result<(f64, PairGrads)> {
    check_same_shape(teacher, student)?;
    let diff = teacher - student;
    let n = diff.len() as f64;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let g = diff.mapv(|d| 2.0 * d / n);
    Ok((
        loss,
        PairGrads {
            student: -&g,
            teacher: g,
        },
    ))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Jensen-Shannon style contrastive loss with in-batch negatives only:
/// `mean_i softplus(−s_ii/τ) + mean_{i≠j} softplus(s_ij/τ)`.
///
/// The softplus discriminator form is this toolkit's choice for the JSD
/// ablation.
pub fn jsd_in_batch_loss(teacher: &HolisticEmbedding, student: &HolisticEmbedding, tau: f64) -> Result<f64> {
    Ok(jsd_in_batch_with_grad(teacher, student, tau)?.0)
}

pub fn jsd_in_batch_with_grad(
    teacher: &HolisticEmbedding,
    student: &HolisticEmbedding,
    tau: f64,
) -> Result<(f64, PairGrads)> {
    check_pair(teacher, student, tau)?;
    let b = teacher.rows();
    if b < 2 {
        invalid!("JSD loss needs at least two rows for in-batch negatives");
    }
    let t = &teacher.vectors;
    let s = &student.vectors;
    let logits = t.dot(&s.t()) / tau;
    let pos_w = 1.0 / b as f64;
    let neg_w = 1.0 / (b * (b - 1)) as f64;
    let mut loss = 0.0;
    let mut grad_logits = Array2::zeros((b, b));
    for ((i, j), &x) in logits.indexed_iter() {
        if i == j {
            loss += pos_w * softplus(-x);
            grad_logits[[i, j]] = -pos_w * sigmoid(-x);
        } else {
            loss += neg_w * softplus(x);
            grad_logits[[i, j]] = neg_w * sigmoid(x);
        }
    }
    Ok((
        loss,
        PairGrads {
            teacher: grad_logits.dot(s) / tau,
            student: grad_logits.t().dot(t) / tau,
        },
    ))
}
