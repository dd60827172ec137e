mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;

use common::*;
use rawm_core::distill::{reg_grad, reg_loss, soften, TeacherContext};
use rawm_core::matcore::{matmul, pinv_thresholded, Matrix, Vector};
use rawm_core::metrics::{accuracy, eer};
use rawm_core::netcore::{argmax_rows, forward, init_network, softmax_rows, Activation, LayerSpec};
use rawm_core::projector::{
    adaptive_direction, complement, compute_beta, compute_q, init_projectors, BetaSpec, MatrixNorm,
};
use rawm_core::strategies::{compute_step, StrategyConfig, StrategyKind, TrainState};

fn simplex(raw: &[f64]) -> Vector {
    let s: f64 = raw.iter().sum();
    Vector::new(raw.iter().map(|v| v / s).collect()).unwrap()
}

fn square(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-2.0f64..2.0, n), n)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn matmul_is_associative(a in square(4), b in square(4), c in square(4)) {
        let (ma, mb, mc) = (to_matrix(&a), to_matrix(&b), to_matrix(&c));
        let left = matmul(&matmul(&ma, &mb).unwrap(), &mc).unwrap();
        let right = matmul(&ma, &matmul(&mb, &mc).unwrap()).unwrap();
        let scale = left.frobenius_norm().max(1.0);
        prop_assert!(left.max_abs_diff(&right) / scale <= 1e-9);
    }

    #[test]
    fn pinv_of_well_conditioned_matrix_is_inverse(n in 1usize..8, seed in any::<u64>()) {
        let mut r = rng(seed);
        // Diagonally dominant, hence invertible and well conditioned.
        let mut a = random_rows(n, n, 1.0, &mut r);
        for (i, row) in a.iter_mut().enumerate() {
            row[i] += 2.0 * n as f64;
        }
        let got = rows_of(&pinv_thresholded(&to_matrix(&a), 1e-14).unwrap());
        let want = inverse(&a);
        prop_assert!(max_abs(&got, &want) / fro(&want) <= 1e-8);
    }

    #[test]
    fn softmax_rows_sum_to_one(z in prop::collection::vec(-50.0f64..50.0, 1..8), t in 0.1f64..10.0) {
        let m = Matrix::new(1, z.len(), z).unwrap();
        let s: f64 = softmax_rows(&m, t).row(0).iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn projector_recursion_matches_closed_form(dim in 1usize..=16, k in 1usize..=50, seed in any::<u64>(), alpha in 0.01f64..2.0) {
        let mut r = rng(seed);
        let xs = random_rows(k, dim, 1.0, &mut r);
        let mut st = init_projectors(&[dim], &[alpha], 1.0, 1e-3).unwrap();
        for x in &xs {
            st.update_p(0, &Vector::new(x.clone()).unwrap()).unwrap();
        }
        let want = projector_closed_form(&xs, alpha);
        prop_assert!(max_abs(&rows_of(&st.p[0]), &want) / fro(&want) <= 1e-8);
    }

    #[test]
    fn repeated_input_is_suppressed_monotonically(dim in 2usize..10, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = Vector::new(random_rows(1, dim, 1.0, &mut r).remove(0)).unwrap();
        let mut st = init_projectors(&[dim], &[0.1], 1.0, 1e-3).unwrap();
        let mut last = f64::INFINITY;
        for _ in 0..10 {
            st.update_p(0, &x).unwrap();
            let now = st.p[0].matvec(&x).unwrap().norm();
            prop_assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn q_is_linear_in_beta(seed in any::<u64>(), beta in 0.05f64..20.0) {
        let mut r = rng(seed);
        let xs = random_rows(3, 6, 3.0, &mut r);
        let mut st = init_projectors(&[6], &[1e-4], 1.0, 1e-3).unwrap();
        for x in &xs {
            st.update_p(0, &Vector::new(x.clone()).unwrap()).unwrap();
        }
        let p = &st.p[0];
        let q1 = compute_q(p, beta, 1e-3).unwrap();
        let q2 = compute_q(p, 2.0 * beta, 1e-3).unwrap();
        prop_assert!(q2.max_abs_diff(&q1.scale(2.0).unwrap()) == 0.0);
    }

    #[test]
    fn complement_component_of_r_grows_linearly_in_beta(seed in any::<u64>(), beta in 0.1f64..10.0) {
        let mut r = rng(seed);
        let xs = random_rows(2, 5, 3.0, &mut r);
        let mut st = init_projectors(&[5], &[1e-4], 1.0, 1e-3).unwrap();
        for x in &xs {
            st.update_p(0, &Vector::new(x.clone()).unwrap()).unwrap();
        }
        let p = &st.p[0];
        let c = complement(p, 1e-3).unwrap();
        prop_assume!(c.frobenius_norm() > 0.5);
        let i_minus_c = Matrix::identity(5).sub(&c).unwrap();
        let part = |b: f64| {
            let rm = adaptive_direction(p, b, 0.1, 1e-3, MatrixNorm::Frobenius).unwrap();
            (matmul(&c, &rm).unwrap(), matmul(&i_minus_c, &rm).unwrap())
        };
        let (c1, p1) = part(beta);
        let (c2, p2) = part(2.0 * beta);
        let (c3, _) = part(3.0 * beta);
        let step = c2.sub(&c1).unwrap();
        prop_assert!(step.frobenius_norm() > 0.0);
        prop_assert!(c3.sub(&c2).unwrap().max_abs_diff(&step) <= 1e-9 * c3.frobenius_norm().max(1.0));
        prop_assert!(p2.max_abs_diff(&p1) <= 1e-9);
    }

    #[test]
    fn beta_is_permutation_invariant_and_increasing(labels in prop::collection::vec(0usize..4, 1..40), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let stable = BTreeSet::from([0, 2]);
        let b = compute_beta(&BetaSpec::from_labels(&stable, &labels, 4).unwrap());
        let mut shuffled = labels.clone();
        shuffled.shuffle(&mut rng(seed));
        prop_assert_eq!(b, compute_beta(&BetaSpec::from_labels(&stable, &shuffled, 4).unwrap()));
        for extra in [0usize, 2] {
            let mut more = labels.clone();
            more.push(extra);
            prop_assert!(compute_beta(&BetaSpec::from_labels(&stable, &more, 4).unwrap()) > b);
        }
    }

    #[test]
    fn soften_preserves_argmax(raw in prop::collection::vec(0.001f64..1.0, 2..6), t in 0.05f64..20.0) {
        let p = simplex(&raw);
        let s = soften(&p, t).unwrap();
        let arg = |v: &Vector| v.as_slice().iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        prop_assert_eq!(arg(&p), arg(&s));
    }

    #[test]
    fn soften_shrinks_towards_uniform(raw in prop::collection::vec(0.001f64..1.0, 2..6)) {
        let p = simplex(&raw);
        let gap = |t: f64| {
            let s = soften(&p, t).unwrap();
            let v = s.as_slice();
            v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min)
        };
        let gaps: Vec<f64> = [1.0, 2.0, 4.0, 8.0].iter().map(|t| gap(*t)).collect();
        for w in gaps.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-15);
        }
    }

    #[test]
    fn reg_loss_obeys_gibbs(a in prop::collection::vec(0.001f64..1.0, 3), b in prop::collection::vec(0.001f64..1.0, 3)) {
        let (p, q) = (simplex(&a), simplex(&b));
        let entropy: f64 = -p.as_slice().iter().map(|v| v * v.ln()).sum::<f64>();
        let self_loss = reg_loss(&p, &p).unwrap();
        prop_assert!((self_loss - entropy).abs() <= 1e-12);
        prop_assert!(reg_loss(&p, &q).unwrap() >= self_loss - 1e-12);
    }

    #[test]
    fn accuracy_is_invariant_under_softening(seed in any::<u64>(), t in 0.1f64..10.0) {
        let mut r = rng(seed);
        let net = init_network(&[LayerSpec::new(4, 5, Activation::Tanh), LayerSpec::new(5, 3, Activation::SoftmaxOutput)], seed).unwrap();
        let x = to_matrix(&random_rows(30, 4, 2.0, &mut r));
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let (probs, _) = forward(&net, &x).unwrap();
        let softened = Matrix::from_rows(
            &(0..probs.rows())
                .map(|i| soften(&Vector::new(probs.row(i).to_vec()).unwrap(), t).unwrap().as_slice().to_vec())
                .collect::<Vec<_>>(),
        ).unwrap();
        prop_assert_eq!(
            accuracy(&argmax_rows(&probs), &labels).unwrap(),
            accuracy(&argmax_rows(&softened), &labels).unwrap()
        );
    }

    #[test]
    fn eer_matches_sweep_oracle(raw in prop::collection::vec((0u8..12, any::<bool>()), 2..50)) {
        let mut raw = raw;
        raw[0].1 = true;
        raw[1].1 = false;
        let scores: Vec<f64> = raw.iter().map(|(s, _)| f64::from(*s) / 4.0).collect();
        let targets: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
        prop_assert_eq!(eer(&scores, &targets).unwrap(), eer_sweep(&scores, &targets));
    }

    #[test]
    fn every_rule_keeps_weights_finite(seed in any::<u64>(), gamma in 0.001f64..1.0) {
        let specs = [LayerSpec::new(5, 6, Activation::Relu), LayerSpec::new(6, 2, Activation::SoftmaxOutput)];
        let mut r = rng(seed);
        let x = to_matrix(&random_rows(8, 5, 3.0, &mut r));
        let y: Vec<usize> = (0..8).map(|i| i % 2).collect();
        for kind in StrategyKind::ALL {
            let cfg = StrategyConfig { gamma, ..StrategyConfig::default().with_kind(kind) };
            let mut st = TrainState::new(init_network(&specs, seed).unwrap(), &cfg).unwrap();
            st.dataset_index = 1;
            st.teacher = Some(TeacherContext::new(init_network(&specs, seed ^ 1).unwrap(), cfg.t_reg).unwrap());
            st.ewc_anchor = Some(rawm_core::strategies::EwcAnchor {
                params: st.net.snapshot(),
                fisher: rawm_core::netcore::GradientSet::zeros_like(&st.net).map(|_| 1.0),
            });
            let out = compute_step(kind, &mut st, &cfg, &x, &y).unwrap();
            st.net.apply_update(&out.delta).unwrap();
            prop_assert!(st.net.flat_params().iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn reg_grad_vanishes_only_when_student_matches_teacher() {
    let specs = [LayerSpec::new(3, 4, Activation::Tanh), LayerSpec::new(4, 2, Activation::SoftmaxOutput)];
    let mut r = rng(3);
    let x = to_matrix(&random_rows(6, 3, 1.0, &mut r));
    let student = init_network(&specs, 1).unwrap();
    let same = TeacherContext::new(student.snapshot(), 2.0).unwrap();
    let (_, g) = reg_grad(&student, &same, &x).unwrap();
    assert!(g.norm() <= 1e-15);
    let other = TeacherContext::new(init_network(&specs, 2).unwrap(), 2.0).unwrap();
    let (_, g) = reg_grad(&student, &other, &x).unwrap();
    assert!(g.norm() > 1e-6);
}
