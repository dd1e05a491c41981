use ndarray::Array2;

use crate::error::{invalid, Result};
use crate::graph::PredictionBatch;
use crate::linalg::{self, Matrix};

/// Mean cross-entropy of `logits` against integer labels, with its gradient
/// w.r.t. the logits.
pub fn cross_entropy_with_grad(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (b, k) = logits.dim();
    if b != labels.len() || b == 0 {
        invalid!("{b} logit rows but {} labels", labels.len());
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        invalid!("label {l} out of range for {k} classes");
    }
    let logp = linalg::log_softmax_rows(&logits.view(), 1.0);
    let mut grad = logp.mapv(f64::exp);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss -= logp[[i, y]];
        grad[[i, y]] -= 1.0;
    }
    Ok((loss / b as f64, grad / b as f64))
}

fn check_predictions(student: &PredictionBatch, teacher: &PredictionBatch) -> Result<()> {
    if student.logits().dim() != teacher.logits().dim() {
        invalid!(
            "student predictions {:?} vs teacher predictions {:?}",
            student.logits().dim(),
            teacher.logits().dim()
        );
    }
    if student.temperature() != teacher.temperature() {
        invalid!(
            "temperatures differ: {} vs {}",
            student.temperature(),
            teacher.temperature()
        );
    }
    Ok(())
}

/// `τ² · mean_i KL(p^s_i ‖ p^t_i)`, the student distribution first.
pub fn vanilla_kd_loss(student: &PredictionBatch, teacher: &PredictionBatch) -> Result<f64> {
    Ok(vanilla_kd_with_grad(student, teacher)?.0)
}

/// Loss and gradient w.r.t. the student logits.
pub fn vanilla_kd_with_grad(student: &PredictionBatch, teacher: &PredictionBatch) -> Result<(f64, Matrix)> {
    check_predictions(student, teacher)?;
    let tau = student.temperature();
    let (b, k) = student.logits().dim();
    let log_p = student.log_soft_targets();
    let log_q = teacher.log_soft_targets();
    let p = student.soft_targets();
    let mut grad = Array2::zeros((b, k));
    let mut total = 0.0;
    for i in 0..b {
        let kl: f64 = (0..k).map(|j| p[[i, j]] * (log_p[[i, j]] - log_q[[i, j]])).sum();
        total += kl;
        for j in 0..k {
            grad[[i, j]] = p[[i, j]] * ((log_p[[i, j]] - log_q[[i, j]]) - kl) / tau;
        }
    }
    let scale = tau * tau / b as f64;
    Ok(((total * scale).max(0.0), grad * scale))
}

/// `ce + λ·kd + β·hol`.
pub fn total_loss(ce: f64, kd: f64, hol: f64, lambda: f64, beta: f64) -> f64 {
    ce + lambda * kd + beta * hol
}

/// Mean squared difference between the teacher's and student's `b × b`
/// cosine-similarity matrices: the relational special case of the holistic
/// objective with an identity encoder.
pub fn relational_reduction_loss(teacher_features: &Matrix, student_features: &Matrix) -> Result<f64> {
    if teacher_features.nrows() != student_features.nrows() || teacher_features.nrows() == 0 {
        invalid!(
            "batch sizes differ: {} vs {}",
            teacher_features.nrows(),
            student_features.nrows()
        );
    }
    let ht = linalg::cosine_similarity_matrix(&teacher_features.view());
    let hs = linalg::cosine_similarity_matrix(&student_features.view());
    Ok((&ht - &hs).mapv(|d| d * d).mean().unwrap_or(0.0))
}
