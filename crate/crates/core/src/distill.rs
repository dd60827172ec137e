//! Teacher/student soft-label regularization.
//!
//! Softening a probability vector by `y^(1/T)` and renormalizing equals
//! `softmax(z / T)` for the logits `z` that produced it, so batch code works
//! from logits and never takes powers of tiny probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::{Matrix, Vector};
use crate::netcore::{backward_from_logits, forward, log_softmax_rows, softmax_rows, ForwardTrace, GradientSet, Network};

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// A frozen teacher network and the softening temperature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherContext {
    teacher: Network,
    t_reg: f64,
}

impl TeacherContext {
    pub fn new(teacher: Network, t_reg: f64) -> Result<Self> {
        if !(t_reg > 0.0 && t_reg.is_finite()) {
            return Err(Error::Config(format!("T_reg must be positive, got {t_reg}")));
        }
        Ok(TeacherContext { teacher, t_reg })
    }

    pub fn teacher(&self) -> &Network {
        &self.teacher
    }

    pub fn t_reg(&self) -> f64 {
        self.t_reg
    }

    /// Softened teacher outputs for every example of the batch.
    pub fn soft_labels(&self, batch: &Matrix) -> Result<Matrix> {
        let (_, trace) = forward(&self.teacher, batch)?;
        Ok(softmax_rows(&trace.logits, self.t_reg))
    }
}

/// `y_i^(1/T) / sum_j y_j^(1/T)`.
pub fn soften(probs: &Vector, t_reg: f64) -> Result<Vector> {
    if !(t_reg > 0.0) {
        return Err(Error::Input(format!("T_reg must be positive, got {t_reg}")));
    }
    let p = probs.as_slice();
    if p.iter().any(|v| *v < 0.0) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::Input("soften expects a probability vector".into()));
    }
    if p.iter().all(|v| *v == 0.0) {
        return Err(Error::Input("soften of an all-zero vector".into()));
    }
    // Work in log space relative to the largest entry to avoid underflow.
    let max = p.iter().cloned().fold(0.0, f64::max);
    let powered: Vec<f64> = p
        .iter()
        .map(|&v| if v == 0.0 { 0.0 } else { ((v.ln() - max.ln()) / t_reg).exp() })
        .collect();
    let sum: f64 = powered.iter().sum();
    Vector::new(powered.into_iter().map(|v| v / sum).collect())
}

/// `-sum_i t_i log s_i` with `0 log 0 = 0` and `s` floored at [`PROB_FLOOR`].
pub fn reg_loss(softened_teacher: &Vector, softened_student: &Vector) -> Result<f64> {
    if softened_teacher.dim() != softened_student.dim() {
        return Err(Error::Shape(format!(
            "teacher dim {} vs student dim {}",
            softened_teacher.dim(),
            softened_student.dim()
        )));
    }
    Ok(softened_teacher
        .as_slice()
        .iter()
        .zip(softened_student.as_slice())
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, s)| -t * s.max(PROB_FLOOR).ln())
        .sum())
}

/// Batch-mean soft cross-entropy between `soft_targets` and the student's
/// logits softened at `t_reg`.
pub fn batch_reg_loss(soft_targets: &Matrix, student_logits: &Matrix, t_reg: f64) -> f64 {
    let log_s = log_softmax_rows(student_logits, t_reg);
    let floor = PROB_FLOOR.ln();
    let n = soft_targets.rows();
    soft_targets
        .data()
        .iter()
        .zip(log_s.data())
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, l)| -t * l.max(floor))
        .sum::<f64>()
        / n as f64
}

/// Gradient of [`batch_reg_loss`] with respect to the student's parameters,
/// reusing an existing student forward trace.
pub fn reg_grad_from_trace(
    student: &Network,
    trace: &ForwardTrace,
    soft_targets: &Matrix,
    t_reg: f64,
) -> Result<(f64, GradientSet)> {
    if soft_targets.shape() != trace.logits.shape() {
        return Err(Error::Shape(format!(
            "soft targets {:?} vs student logits {:?}",
            soft_targets.shape(),
            trace.logits.shape()
        )));
    }
    let n = trace.batch_size() as f64;
    let loss = batch_reg_loss(soft_targets, &trace.logits, t_reg);
    let student_soft = softmax_rows(&trace.logits, t_reg);
    let dlogits = student_soft
        .sub(soft_targets)?
        .scale(1.0 / (n * t_reg))?;
    let grads = backward_from_logits(student, trace, &dlogits)?;
    Ok((loss, grads))
}

/// Exact gradient of the batch-mean regularization loss; the teacher is only read.
pub fn reg_grad(student: &Network, ctx: &TeacherContext, batch: &Matrix) -> Result<(f64, GradientSet)> {
    let targets = ctx.soft_labels(batch)?;
    let (_, trace) = forward(student, batch)?;
    reg_grad_from_trace(student, &trace, &targets, ctx.t_reg)
}
