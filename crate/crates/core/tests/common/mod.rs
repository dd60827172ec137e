//! Reference implementations used as oracles by the integration tests.
//! Deliberately naive and independent of the library's own numerics.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rawm_core::matcore::{Matrix, Vector};
use rawm_core::netcore::{Activation, Layer, Network};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_rows(n: usize, d: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-scale..scale)).collect()).collect()
}

pub fn to_matrix(rows: &[Vec<f64>]) -> Matrix {
    Matrix::from_rows(rows).unwrap()
}

pub fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

pub fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    (0..n)
        .map(|i| (0..m).map(|j| (0..k).map(|t| a[i][t] * b[t][j]).sum()).collect())
        .collect()
}

pub fn fro(a: &[Vec<f64>]) -> f64 {
    a.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn max_abs(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, p);
        let d = m[c][c];
        for v in m[c].iter_mut() {
            *v /= d;
        }
        let pivot = m[c].clone();
        for (r, row) in m.iter_mut().enumerate() {
            if r != c {
                let f = row[c];
                for (v, p) in row.iter_mut().zip(&pivot) {
                    *v -= f * p;
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// `alpha (alpha I + sum x x^T)^-1`.
pub fn projector_closed_form(xs: &[Vec<f64>], alpha: f64) -> Vec<Vec<f64>> {
    let d = xs[0].len();
    let mut a: Vec<Vec<f64>> = identity(d).into_iter().map(|r| r.into_iter().map(|v| v * alpha).collect()).collect();
    for x in xs {
        for i in 0..d {
            for j in 0..d {
                a[i][j] += x[i] * x[j];
            }
        }
    }
    inverse(&a).into_iter().map(|r| r.into_iter().map(|v| v * alpha).collect()).collect()
}

/// Exhaustive threshold sweep: thresholds below, between and above all
/// scores, accept when `score > t`, smallest `|FAR - FRR|`, ties to the
/// earlier (lower) threshold, EER as the mean of the two rates.
pub fn eer_sweep(scores: &[f64], targets: &[bool]) -> f64 {
    let mut t: Vec<f64> = scores.to_vec();
    t.sort_by(f64::total_cmp);
    t.dedup();
    let mut th = vec![t[0] - 1.0];
    th.extend(t.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    th.push(t[t.len() - 1] + 1.0);
    let nt = targets.iter().filter(|b| **b).count() as f64;
    let nn = targets.len() as f64 - nt;
    let mut best = (f64::INFINITY, f64::NAN);
    for th in th {
        let far = scores.iter().zip(targets).filter(|(s, l)| !**l && **s > th).count() as f64 / nn;
        let frr = scores.iter().zip(targets).filter(|(s, l)| **l && **s < th).count() as f64 / nt;
        if (far - frr).abs() < best.0 {
            best = ((far - frr).abs(), (far + frr) / 2.0);
        }
    }
    best.1
}

fn act(a: Activation, z: f64) -> f64 {
    match a {
        Activation::Relu => z.max(0.0),
        Activation::Tanh => z.tanh(),
        Activation::Identity | Activation::SoftmaxOutput => z,
    }
}

/// Logits of every row, computed one example at a time.
pub fn logits(net: &Network, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|x| {
            let mut a = x.clone();
            for l in net.layers() {
                let z: Vec<f64> = (0..l.spec.output_dim)
                    .map(|o| l.weights.row(o).iter().zip(&a).map(|(w, v)| w * v).sum::<f64>() + l.bias.as_slice()[o])
                    .collect();
                a = z.into_iter().map(|z| act(l.spec.activation, z)).collect();
            }
            a
        })
        .collect()
}

pub fn softmax(z: &[f64], t: f64) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mean cross-entropy of the labels.
pub fn ce_loss(net: &Network, rows: &[Vec<f64>], labels: &[usize]) -> f64 {
    logits(net, rows)
        .iter()
        .zip(labels)
        .map(|(z, &y)| -softmax(z, 1.0)[y].ln())
        .sum::<f64>()
        / rows.len() as f64
}

/// Mean `-sum t log s` between softened teacher and student outputs.
pub fn distill_loss(student: &Network, teacher: &Network, rows: &[Vec<f64>], t: f64) -> f64 {
    let zs = logits(student, rows);
    let zt = logits(teacher, rows);
    zs.iter()
        .zip(&zt)
        .map(|(s, q)| {
            let ps = softmax(s, t);
            softmax(q, t).iter().zip(&ps).map(|(a, b)| -a * b.ln()).sum::<f64>()
        })
        .sum::<f64>()
        / rows.len() as f64
}

/// Central differences over every weight then bias, layer by layer.
pub fn central_differences(net: &Network, h: f64, loss: impl Fn(&Network) -> f64) -> Vec<f64> {
    let shifted = |li: usize, idx: usize, is_bias: bool, d: f64| {
        let mut layers: Vec<Layer> = net.layers().to_vec();
        let l = &mut layers[li];
        if is_bias {
            let mut b = l.bias.as_slice().to_vec();
            b[idx] += d;
            l.bias = Vector::new(b).unwrap();
        } else {
            let mut w = l.weights.data().to_vec();
            w[idx] += d;
            l.weights = Matrix::new(l.weights.rows(), l.weights.cols(), w).unwrap();
        }
        Network::from_layers(layers).unwrap()
    };
    let mut out = Vec::new();
    for (li, l) in net.layers().iter().enumerate() {
        for (count, is_bias) in [(l.weights.data().len(), false), (l.bias.dim(), true)] {
            for idx in 0..count {
                out.push((loss(&shifted(li, idx, is_bias, h)) - loss(&shifted(li, idx, is_bias, -h))) / (2.0 * h));
            }
        }
    }
    out
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / 1f64.max(x.abs()).max(y.abs()))
        .fold(0.0, f64::max)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
