//! Recursive input-subspace projectors and the adaptive update direction.
//!
//! Each layer keeps a square matrix `P` over its input space, initialized to
//! the identity and shrunk by a rank-one recursive-least-squares step for
//! every batch-mean input it sees. After many updates
//! `P = alpha (alpha I + sum x x^T)^-1`: directions spanned by past inputs
//! have small eigenvalues, unseen directions stay near one.
//!
//! The complement `C = I - P P+` uses a rank-truncated pseudo-inverse, so `C`
//! projects onto the directions where `P` is negligible relative to its
//! largest singular value, i.e. onto the strongly represented old inputs.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::{frobenius_norm, matmul, pinv_thresholded, spectral_norm, Matrix, Vector};

/// Matrix norm used to normalize `P` and `Q` in the adaptive direction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixNorm {
    #[default]
    Frobenius,
    Spectral,
}

impl MatrixNorm {
    pub fn of(self, m: &Matrix) -> Result<f64> {
        match self {
            MatrixNorm::Frobenius => Ok(frobenius_norm(m)),
            MatrixNorm::Spectral => spectral_norm(m),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorState {
    /// One square projector per layer, side = layer input dimension.
    pub p: Vec<Matrix>,
    pub alpha: Vec<f64>,
    pub alpha_decay: f64,
    pub tau_rel: f64,
    pub updates_seen: u64,
    /// Projectors captured at the last dataset transition, used when the
    /// update direction is held fixed for a whole dataset.
    pub frozen: Option<Vec<Matrix>>,
}

pub fn init_projectors(
    input_dims: &[usize],
    alpha_per_layer: &[f64],
    alpha_decay: f64,
    tau_rel: f64,
) -> Result<ProjectorState> {
    if input_dims.len() != alpha_per_layer.len() {
        return Err(Error::Config(format!(
            "{} alpha values for {} layers",
            alpha_per_layer.len(),
            input_dims.len()
        )));
    }
    if let Some(a) = alpha_per_layer.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
        return Err(Error::Config(format!("alpha must be positive, got {a}")));
    }
    if !(alpha_decay > 0.0 && alpha_decay <= 1.0) {
        return Err(Error::Config(format!(
            "alpha_decay must lie in (0,1], got {alpha_decay}"
        )));
    }
    if !(tau_rel > 0.0 && tau_rel < 1.0) {
        return Err(Error::Config(format!("tau_rel must lie in (0,1), got {tau_rel}")));
    }
    Ok(ProjectorState {
        p: input_dims.iter().map(|&d| Matrix::identity(d)).collect(),
        alpha: alpha_per_layer.to_vec(),
        alpha_decay,
        tau_rel,
        updates_seen: 0,
        frozen: None,
    })
}

impl ProjectorState {
    pub fn num_layers(&self) -> usize {
        self.p.len()
    }

    /// Rank-one RLS update of layer `layer` with the batch-mean input `xbar`:
    /// `k = P x / (alpha + x^T P x)`, `P <- P - k x^T P`.
    pub fn update_p(&mut self, layer: usize, xbar: &Vector) -> Result<()> {
        let p = self
            .p
            .get(layer)
            .ok_or_else(|| Error::Input(format!("no projector for layer {layer}")))?;
        if xbar.dim() != p.rows() {
            return Err(Error::Shape(format!(
                "layer {layer}: mean input has dim {}, projector side is {}",
                xbar.dim(),
                p.rows()
            )));
        }
        let n = p.rows();
        let x = xbar.as_slice();
        let px = p.matvec(xbar)?;
        // Row vector x^T P, computed separately so no symmetry is assumed.
        let mut xtp = vec![0.0; n];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (acc, v) in xtp.iter_mut().zip(p.row(i)) {
                *acc += xi * v;
            }
        }
        let denom = self.alpha[layer] + xbar.dot(&px);
        let mut next = p.data().to_vec();
        for i in 0..n {
            let ki = px[i] / denom;
            if ki == 0.0 {
                continue;
            }
            for (v, t) in next[i * n..(i + 1) * n].iter_mut().zip(&xtp) {
                *v -= ki * t;
            }
        }
        self.p[layer] = Matrix::new(n, n, next)?;
        self.updates_seen += 1;
        Ok(())
    }

    /// Multiplies every layer's alpha by the decay factor.
    pub fn decay_alpha(&mut self) {
        let d = self.alpha_decay;
        self.alpha.iter_mut().for_each(|a| *a *= d);
    }

    pub fn freeze(&mut self) {
        self.frozen = Some(self.p.clone());
    }

    /// Projector used for the gradient step: the frozen copy if requested and
    /// available, otherwise the live one.
    pub fn active(&self, layer: usize, use_frozen: bool) -> &Matrix {
        match (&self.frozen, use_frozen) {
            (Some(f), true) => &f[layer],
            _ => &self.p[layer],
        }
    }
}

/// Per-batch class counts together with the set of stable classes.
#[derive(Clone, Debug, PartialEq)]
pub struct BetaSpec {
    pub stable_classes: BTreeSet<usize>,
    pub counts: Vec<usize>,
}

impl BetaSpec {
    pub fn new(stable_classes: BTreeSet<usize>, counts: Vec<usize>) -> Result<Self> {
        validate_stable(&stable_classes, counts.len())?;
        Ok(BetaSpec {
            stable_classes,
            counts,
        })
    }

    pub fn from_labels(stable_classes: &BTreeSet<usize>, labels: &[usize], classes: usize) -> Result<Self> {
        let mut counts = vec![0; classes];
        for &y in labels {
            *counts
                .get_mut(y)
                .ok_or_else(|| Error::Input(format!("label {y} out of range for {classes} classes")))? += 1;
        }
        BetaSpec::new(stable_classes.clone(), counts)
    }
}

pub fn validate_stable(stable: &BTreeSet<usize>, classes: usize) -> Result<()> {
    if stable.is_empty() {
        return Err(Error::Config("stable class set is empty".into()));
    }
    if stable.len() >= classes {
        return Err(Error::Config(format!(
            "stable classes {stable:?} must be a strict subset of {classes} classes"
        )));
    }
    if let Some(c) = stable.iter().find(|&&c| c >= classes) {
        return Err(Error::Config(format!("stable class {c} out of range for {classes} classes")));
    }
    Ok(())
}

/// Smoothed ratio of stable-class to other-class counts in a batch:
/// `(sum stable + 1) / (sum others + 1)`.
pub fn compute_beta(spec: &BetaSpec) -> f64 {
    let (stable, other) = spec
        .counts
        .iter()
        .enumerate()
        .fold((0usize, 0usize), |(s, o), (c, &n)| {
            if spec.stable_classes.contains(&c) {
                (s + n, o)
            } else {
                (s, o + n)
            }
        });
    (stable as f64 + 1.0) / (other as f64 + 1.0)
}

/// `C = I - P P+_tau`, the projector onto the truncated subspace of `P`.
pub fn complement(p: &Matrix, tau_rel: f64) -> Result<Matrix> {
    if !p.is_square() {
        return Err(Error::Shape(format!("projector must be square, got {:?}", p.shape())));
    }
    let pp = matmul(p, &pinv_thresholded(p, tau_rel)?)?;
    Matrix::identity(p.rows()).sub(&pp)
}

/// `Q = beta * C`.
pub fn compute_q(p: &Matrix, beta: f64, tau_rel: f64) -> Result<Matrix> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Input(format!("beta must be positive, got {beta}")));
    }
    complement(p, tau_rel)?.scale(beta)
}

/// `R = P/|P| + m Q/|C|`, with the second term dropped when `C = 0`.
pub fn compute_r(p: &Matrix, q: &Matrix, m: f64, tau_rel: f64, norm: MatrixNorm) -> Result<Matrix> {
    if p.shape() != q.shape() {
        return Err(Error::Shape(format!("P {:?} vs Q {:?}", p.shape(), q.shape())));
    }
    let c = complement(p, tau_rel)?;
    direction_from_parts(p, q, &c, m, norm)
}

/// Adaptive direction for one layer, computing the complement only once.
pub fn adaptive_direction(p: &Matrix, beta: f64, m: f64, tau_rel: f64, norm: MatrixNorm) -> Result<Matrix> {
    let c = complement(p, tau_rel)?;
    let q = c.scale(beta)?;
    direction_from_parts(p, &q, &c, m, norm)
}

fn direction_from_parts(p: &Matrix, q: &Matrix, c: &Matrix, m: f64, norm: MatrixNorm) -> Result<Matrix> {
    if m < 0.0 {
        return Err(Error::Input(format!("m must be non-negative, got {m}")));
    }
    let p_norm = norm.of(p)?;
    if p_norm == 0.0 {
        return Err(Error::Numeric("projector has zero norm".into()));
    }
    let p_part = p.scale(1.0 / p_norm)?;
    let c_norm = norm.of(c)?;
    if c_norm == 0.0 || m == 0.0 {
        return Ok(p_part);
    }
    p_part.add(&q.scale(m / c_norm)?)
}

/// Projects a weight gradient (`out x in`) through an input-space matrix:
/// `grad * M`. Both `P` and `R` are symmetric, so this is the row-space form
/// of `M * grad^T`.
pub fn project_gradient(grad: &Matrix, m: &Matrix) -> Result<Matrix> {
    matmul(grad, m)
}
