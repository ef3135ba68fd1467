mod common;

use common::*;
use eigendyn::analysis::{classify, Regime, Thresholds, TrajectoryRecord};
use eigendyn::linalg::Matrix;
use eigendyn::losses::{eval_loss_and_grads, LossSpec, Metric, PreparedPredictor, Variant};
use eigendyn::network::{Activation, EncoderParams};
use eigendyn::theory::{
    cos_exact_rhs, euc_exact_rhs, integrate, integrate_table1, ntk_block, table1_eigen_rhs, TheoryError,
    DEFAULT_DT,
};

/// `−η ∇_{ẑ1} L` computed in the original space and rotated into the eigenbasis.
fn eigenbasis_descent(metric: Metric, pred: &Predictor, zh1: &[f64], zh2: &[f64], eta: f64) -> Vec<f64> {
    let u = &pred.basis;
    let z1 = u.matvec(zh1);
    let z2 = u.matvec(zh2);
    let spec = LossSpec::new(metric, Variant::Standard);
    let p = PreparedPredictor::new(&spec, pred.p.clone()).unwrap();
    let g = eval_loss_and_grads(&spec, &z1, &z2, &p).unwrap().grad_z1;
    u.tr_matvec(&g).iter().map(|v| -eta * v).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn exact_rhs_equals_negative_scaled_loss_gradient() {
    for seed in 0..120 {
        let mut r = rng(seed + 10_000);
        let m = 2 + seed as usize % 8;
        let pred = random_predictor(&mut r, m);
        let zh1 = normal_vec(&mut r, m);
        let zh2 = normal_vec(&mut r, m);
        let eta = uniform(&mut r, 0.05, 2.0);
        let euc = euc_exact_rhs(&zh1, &zh2, &pred.eigenvalues, eta).unwrap();
        let want = eigenbasis_descent(Metric::Euclidean, &pred, &zh1, &zh2, eta);
        assert!(max_abs_diff(&euc, &want) < 1e-10, "euclidean seed {seed}");
        let cos = cos_exact_rhs(&zh1, &zh2, &pred.eigenvalues, eta).unwrap();
        let want = eigenbasis_descent(Metric::Cosine, &pred, &zh1, &zh2, eta);
        assert!(max_abs_diff(&cos, &want) < 1e-10, "cosine seed {seed}");
    }
}

#[test]
fn ntk_of_linear_encoder_is_inner_product_times_identity() {
    for seed in 0..20 {
        let mut r = rng(seed + 20_000);
        let (m, n) = (2 + seed as usize % 5, 3 + seed as usize % 4);
        let enc = EncoderParams::random(m, n, 1.0, Activation::Linear, &mut r);
        let xi = normal_vec(&mut r, n);
        let xj = normal_vec(&mut r, n);
        let ip: f64 = xi.iter().zip(&xj).map(|(a, b)| a * b).sum();
        let plain = ntk_block(&enc, &xi, &xj, &Matrix::identity(m)).unwrap();
        let want = Matrix::identity(m).scaled(ip);
        assert!(plain.sub(&want).max_abs() < 1e-12, "seed {seed}");
        let rotated = ntk_block(&enc, &xi, &xj, &random_orthogonal(&mut r, m)).unwrap();
        assert!(rotated.sub(&plain).max_abs() < 1e-12, "seed {seed}");
    }
}

#[test]
fn ntk_examples() {
    let mut r = rng(1);
    let enc = EncoderParams::random(3, 4, 1.0, Activation::Linear, &mut r);
    let e0 = [1.0, 0.0, 0.0, 0.0];
    let e1 = [0.0, 1.0, 0.0, 0.0];
    let same = ntk_block(&enc, &e0, &e0, &Matrix::identity(3)).unwrap();
    assert!(same.sub(&Matrix::identity(3)).max_abs() < 1e-12);
    let orth = ntk_block(&enc, &e0, &e1, &Matrix::identity(3)).unwrap();
    assert!(orth.max_abs() < 1e-12);
    let relu = EncoderParams { activation: Activation::Relu, ..enc };
    assert!(matches!(ntk_block(&relu, &e0, &e0, &Matrix::identity(3)), Err(TheoryError::NonLinearEncoder)));
}

#[test]
fn rk4_matches_exponential_and_is_fourth_order() {
    let traj = integrate(|x| Ok(vec![-x[0]]), &[1.0], 0.01, 100).unwrap();
    assert!((traj.last()[0] - (-1.0f64).exp()).abs() < 1e-6);
    let err = |dt: f64| {
        let steps = (1.0 / dt).round() as usize;
        let t = integrate(|x| Ok(vec![-x[0]]), &[1.0], dt, steps).unwrap();
        (t.last()[0] - (-1.0f64).exp()).abs()
    };
    let ratio = err(0.1) / err(0.05);
    assert!((ratio - 16.0).abs() < 1.5, "ratio {ratio}");
    let flat = integrate(|x| Ok(vec![0.0; x.len()]), &[0.3, 2.0], 0.1, 50).unwrap();
    assert!(flat.states.iter().all(|s| s == &vec![0.3, 2.0]));
    assert!(flat.times.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn euclidean_scalar_system_rises_monotonically_to_one() {
    // λ = ẑ², dẑ/dt = λ(1 − λ)ẑ
    let traj = integrate(
        |z| Ok(vec![z[0] * z[0] * (1.0 - z[0] * z[0]) * z[0]]),
        &[0.5],
        DEFAULT_DT,
        20_000,
    )
    .unwrap();
    let lam: Vec<f64> = traj.states.iter().map(|s| s[0] * s[0]).collect();
    assert!((lam[0] - 0.25).abs() < 1e-15);
    assert!(lam.windows(2).all(|w| w[1] >= w[0]));
    assert!((lam.last().unwrap() - 1.0).abs() < 1e-3);
}

#[test]
fn sign_structure() {
    let es = LossSpec::new(Metric::Euclidean, Variant::Standard);
    let cs = LossSpec::new(Metric::Cosine, Variant::Standard);
    for seed in 0..50 {
        let mut r = rng(seed + 30_000);
        let lam: Vec<f64> = (0..6).map(|_| uniform(&mut r, 0.01, 2.5)).collect();
        let rhs = table1_eigen_rhs(&es, &lam, 1.0).unwrap();
        for (l, d) in lam.iter().zip(&rhs) {
            assert_eq!(*d > 0.0, *l > 0.0 && *l < 1.0, "λ={l} dλ={d}");
        }
        let mut dom: Vec<f64> = (0..6).map(|_| uniform(&mut r, 0.05, 0.3)).collect();
        dom[0] = 3.0;
        let rhs = table1_eigen_rhs(&cs, &dom, 1.0).unwrap();
        assert!(rhs[0] < 0.0 && rhs[1..].iter().all(|d| *d > 0.0), "{rhs:?}");
    }
}

#[test]
fn integrated_rows_reach_their_regime_for_a_representative_start() {
    // all starts below one, so the no_stop_grad row can reach zero
    let lam0 = [0.9, 0.6, 0.45, 0.3, 0.2];
    let cases = [
        (Metric::Euclidean, Variant::Standard, Regime::ConvergeToOne),
        (Metric::Euclidean, Variant::NoStopGrad, Regime::Collapse),
        (Metric::Euclidean, Variant::NoPredictor, Regime::Static),
        (Metric::Euclidean, Variant::Iso, Regime::ConvergeToOne),
        (Metric::Cosine, Variant::Standard, Regime::ConvergeToEqual),
        (Metric::Cosine, Variant::Iso, Regime::ConvergeToEqual),
    ];
    for (metric, variant, want) in cases {
        let spec = LossSpec::new(metric, variant);
        let traj = integrate_table1(&spec, &lam0, 1.0, DEFAULT_DT, 100_000).unwrap();
        let v = classify(&TrajectoryRecord::from_theory(&traj), &Thresholds::default()).unwrap();
        assert_eq!(v.label, want, "{spec}: {}", v.evidence);
    }
}

#[test]
fn blow_up_truncates_with_flag() {
    let traj = integrate(|x| Ok(vec![x[0] * x[0]]), &[1.0], 0.01, 1000).unwrap();
    assert!(traj.diverged);
    assert!(traj.len() < 1001);
    assert!(traj.states.iter().all(|s| s[0].is_finite()));
}
