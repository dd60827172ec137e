//! Quick invariant and oracle checks runnable from an installed binary.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distill::{batch_reg_loss, reg_grad, TeacherContext};
use crate::error::Result;
use crate::harness::Checkpoint;
use crate::matcore::{matmul, Matrix, Vector};
use crate::metrics::eer;
use crate::netcore::{
    backward, finite_difference_gradient, forward, init_network, max_relative_error, Activation, LayerSpec,
};
use crate::projector::{complement, init_projectors};
use crate::strategies::{compute_step, StrategyConfig, StrategyKind, TrainState};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, outcome: Result<(bool, String)>) -> CheckResult {
    match outcome {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Gauss-Jordan inverse with partial pivoting.
fn gauss_inverse(a: &Matrix) -> Matrix {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = a.row(i).to_vec();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, p);
        let d = m[c][c];
        m[c].iter_mut().for_each(|v| *v /= d);
        for r in 0..n {
            if r != c {
                let f = m[r][c];
                let pivot = m[c].clone();
                m[r].iter_mut().zip(&pivot).for_each(|(v, p)| *v -= f * p);
            }
        }
    }
    let data = m.into_iter().flat_map(|row| row[n..].to_vec()).collect();
    Matrix::new(n, n, data).unwrap()
}

fn projector_closed_form() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (dim, alpha) = (6, 0.5);
    let mut state = init_projectors(&[dim], &[alpha], 1.0, 1e-3)?;
    let mut gram = Matrix::zeros(dim, dim);
    for _ in 0..20 {
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        state.update_p(0, &Vector::new(x.clone())?)?;
        let outer = Matrix::from_fn(dim, dim, |i, j| x[i] * x[j])?;
        gram = gram.add(&outer)?;
    }
    let closed = gauss_inverse(&Matrix::identity(dim).scale(alpha)?.add(&gram)?).scale(alpha)?;
    let err = state.p[0].max_abs_diff(&closed) / closed.frobenius_norm();
    Ok((err <= 1e-8, format!("relative error {err:.2e}")))
}

fn complement_idempotent() -> Result<(bool, String)> {
    let p = Matrix::from_diag(&[1.0, 0.5, 1e-7, 1e-8])?;
    let c = complement(&p, 1e-3)?;
    let err = matmul(&c, &c)?.sub(&c)?.frobenius_norm();
    Ok((err <= 1e-8, format!("|C^2 - C| = {err:.2e}")))
}

fn gradients_match_finite_differences() -> Result<(bool, String)> {
    let specs = [
        LayerSpec::new(4, 5, Activation::Tanh),
        LayerSpec::new(5, 3, Activation::SoftmaxOutput),
    ];
    let net = init_network(&specs, 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_matrix(6, 4, &mut rng)?;
    let y = [0, 1, 2, 1, 0, 2];
    let (_, trace) = forward(&net, &x)?;
    let (_, g) = backward(&net, &trace, &y)?;
    let fd = finite_difference_gradient(&net, 1e-5, |n| crate::netcore::batch_loss(n, &x, &y))?;
    let ce = max_relative_error(&g.flat(), &fd);
    let ctx = TeacherContext::new(init_network(&specs, 5)?, 2.0)?;
    let (_, gr) = reg_grad(&net, &ctx, &x)?;
    let targets = ctx.soft_labels(&x)?;
    let fd = finite_difference_gradient(&net, 1e-5, |n| {
        let (_, tr) = forward(n, &x)?;
        Ok(batch_reg_loss(&targets, &tr.logits, 2.0))
    })?;
    let reg = max_relative_error(&gr.flat(), &fd);
    Ok((ce <= 1e-4 && reg <= 1e-4, format!("cross-entropy {ce:.2e}, distillation {reg:.2e}")))
}

fn eer_matches_sweep() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..200 {
        let n = rng.random_range(2..30);
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..10) as f64) / 10.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let got = eer(&scores, &labels)?;
        // Midpoint thresholds, plus one below and one above every score.
        let mut t: Vec<f64> = scores.clone();
        t.sort_by(f64::total_cmp);
        t.dedup();
        let mut th = vec![t[0] - 1.0];
        th.extend(t.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
        th.push(t[t.len() - 1] + 1.0);
        let nt = labels.iter().filter(|l| **l).count() as f64;
        let nn = n as f64 - nt;
        let mut best = (f64::INFINITY, 0.0);
        for th in th {
            let far = scores.iter().zip(&labels).filter(|(s, l)| !**l && **s > th).count() as f64 / nn;
            let frr = scores.iter().zip(&labels).filter(|(s, l)| **l && **s < th).count() as f64 / nt;
            if (far - frr).abs() < best.0 {
                best = ((far - frr).abs(), (far + frr) / 2.0);
            }
        }
        if got != best.1 {
            return Ok((false, format!("trial {trial}: {got} vs {}", best.1)));
        }
    }
    Ok((true, "200 random score sets".into()))
}

fn rawm_reduces_to_awm() -> Result<(bool, String)> {
    let specs = [
        LayerSpec::new(3, 4, Activation::Relu),
        LayerSpec::new(4, 2, Activation::SoftmaxOutput),
    ];
    let cfg = StrategyConfig {
        eta: 0.0,
        ..StrategyConfig::default()
    };
    let mut state = TrainState::new(init_network(&specs, 8)?, &cfg)?;
    state.teacher = Some(TeacherContext::new(init_network(&specs, 9)?, cfg.t_reg)?);
    state.dataset_index = 1;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random_matrix(4, 3, &mut rng)?;
    let y = [0, 1, 1, 0];
    let mut a = state.clone();
    let mut b = state;
    let r = compute_step(StrategyKind::Rawm, &mut a, &cfg, &x, &y)?;
    let w = compute_step(StrategyKind::Awm, &mut b, &cfg, &x, &y)?;
    let diff = r.delta.max_abs_diff(&w.delta);
    Ok((diff <= 1e-12, format!("max difference {diff:.2e}")))
}

fn checkpoint_round_trip() -> Result<(bool, String)> {
    let specs = vec![LayerSpec::new(3, 2, Activation::SoftmaxOutput)];
    let cfg = StrategyConfig {
        stable_classes: BTreeSet::from([0]),
        ..StrategyConfig::default()
    };
    let ckpt = Checkpoint {
        label: "check".into(),
        seed: 1,
        specs: specs.clone(),
        state: TrainState::new(init_network(&specs, 1)?, &cfg)?,
        history: Vec::new(),
    };
    let bytes = ckpt.to_bytes()?;
    let again = Checkpoint::from_bytes(&bytes)?.to_bytes()?;
    Ok((bytes == again, format!("{} bytes", bytes.len())))
}

/// Runs every check.
pub fn run_checks() -> Vec<CheckResult> {
    vec![
        check("projector recursion matches closed form", projector_closed_form()),
        check("complement projector is idempotent", complement_idempotent()),
        check("gradients match finite differences", gradients_match_finite_differences()),
        check("eer matches exhaustive threshold sweep", eer_matches_sweep()),
        check("rawm with eta=0 equals awm", rawm_reduces_to_awm()),
        check("checkpoint round trip is byte-identical", checkpoint_round_trip()),
    ]
}
