//! Shared oracles for the integration tests: seeded random instances, an
//! independent Gram-Schmidt basis, and stop-grad surrogate loss values whose
//! central differences must reproduce the hand-derived gradients.
#![allow(dead_code)]

use eigendyn::linalg::{dot, matrix_power, norm, Matrix, SymMatrix};
use eigendyn::losses::{eval_loss_and_grads, LossError, LossSpec, Metric, PreparedPredictor, Variant};
use eigendyn::network::{
    batch_gradients, forward, Activation, EncoderParams, NetworkError, PredictorState, SiameseState,
};
use eigendyn::synth_data::{sample_batch, standard_normal, stream_rng, AugmentedPair, RunRng};

pub const FD_STEP: f64 = 1e-6;
pub const FD_REL_TOL: f64 = 1e-5;

pub fn rng(seed: u64) -> RunRng {
    stream_rng(seed, 77)
}

pub fn normal_vec(rng: &mut RunRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| standard_normal(rng)).collect()
}

pub fn uniform(rng: &mut RunRng, lo: f64, hi: f64) -> f64 {
    use rand::Rng;
    rng.random_range(lo..hi)
}

/// Random orthogonal matrix by Gram-Schmidt on Gaussian columns.
pub fn random_orthogonal(rng: &mut RunRng, m: usize) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(m);
    while cols.len() < m {
        let mut v = normal_vec(rng, m);
        for _ in 0..2 {
            for c in &cols {
                let p = dot(&v, c);
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
            }
        }
        let n = norm(&v);
        if n < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= n);
        cols.push(v);
    }
    Matrix::from_fn(m, m, |i, j| cols[j][i])
}

/// `U diag(d) Uᵀ`.
pub fn spectral(u: &Matrix, d: &[f64]) -> Matrix {
    let m = d.len();
    Matrix::from_fn(m, m, |i, j| (0..m).map(|k| u[(i, k)] * d[k] * u[(j, k)]).sum())
}

/// A symmetric positive-definite predictor with a known square root.
pub struct Predictor {
    pub p: Matrix,
    pub sqrt: Matrix,
    pub basis: Matrix,
    pub eigenvalues: Vec<f64>,
}

pub fn random_predictor(rng: &mut RunRng, m: usize) -> Predictor {
    let basis = random_orthogonal(rng, m);
    let eigenvalues: Vec<f64> = (0..m).map(|_| uniform(rng, 0.2, 2.0)).collect();
    let roots: Vec<f64> = eigenvalues.iter().map(|l| l.sqrt()).collect();
    Predictor {
        p: spectral(&basis, &eigenvalues),
        sqrt: spectral(&basis, &roots),
        basis,
        eigenvalues,
    }
}

/// Every asymmetric configuration a loss can be evaluated in.
pub fn all_specs() -> Vec<LossSpec> {
    let mut v = LossSpec::table_rows();
    v.push(LossSpec::new(Metric::Euclidean, Variant::IsoAlternative));
    v
}

/// Loss of one ordering with every stop-gradient factor evaluated at the
/// frozen point `(a0, b0)` and the live arguments `(a, b)` free. Here `a` is
/// the online output and `b` the target output; for variants with a
/// stop-gradient on the target, `b` is ignored in favour of `b0`.
pub fn surrogate(
    spec: &LossSpec,
    a: &[f64],
    b: &[f64],
    a0: &[f64],
    b0: &[f64],
    pred: &Matrix,
    sqrt: &Matrix,
) -> f64 {
    let b = if spec.variant == Variant::NoStopGrad { b } else { b0 };
    let pa = pred.matvec(a);
    match (spec.metric, spec.variant) {
        (Metric::Euclidean, Variant::Standard | Variant::NoStopGrad) => {
            0.5 * pa.iter().zip(b).map(|(p, y)| (p - y).powi(2)).sum::<f64>()
        }
        (Metric::Euclidean, Variant::NoPredictor) => {
            0.5 * a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
        }
        (Metric::Euclidean, Variant::Iso) => {
            let pa0 = pred.matvec(a0);
            let c: Vec<f64> = (0..a.len()).map(|i| b0[i] + a0[i] - pa0[i]).collect();
            0.5 * a.iter().zip(&c).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
        }
        (Metric::Euclidean, Variant::IsoAlternative) => {
            let pa0 = pred.matvec(a0);
            (0..a.len()).map(|i| (pa0[i] - b0[i]) * (a[i] - b0[i])).sum()
        }
        (Metric::Cosine, Variant::Standard | Variant::NoStopGrad) => {
            -dot(&pa, b) / (norm(&pa) * norm(b))
        }
        (Metric::Cosine, Variant::NoPredictor) => -dot(a, b) / (norm(a) * norm(b)),
        (Metric::Cosine, Variant::Iso) => {
            let pa0 = pred.matvec(a0);
            let np0 = norm(&pa0);
            let nb0 = norm(b0);
            let lead = 1.0 / (np0 * nb0);
            let k = dot(&pa0, b0) / (np0.powi(3) * nb0);
            let s = sqrt.matvec(a);
            -dot(a, b0) * lead + 0.5 * k * dot(&s, &s)
        }
        (Metric::Cosine, Variant::IsoAlternative) => unreachable!("not a valid spec"),
    }
}

/// Symmetrized surrogate: mean of both orderings, each with its own frozen
/// target. In the swapped ordering `b` is the online output.
pub fn surrogate_sym(
    spec: &LossSpec,
    a: &[f64],
    b: &[f64],
    a0: &[f64],
    b0: &[f64],
    pred: &Matrix,
    sqrt: &Matrix,
) -> f64 {
    let s = spec.symmetrized(false);
    0.5 * (surrogate(&s, a, b, a0, b0, pred, sqrt) + surrogate(&s, b, a, b0, a0, pred, sqrt))
}

/// Central differences of `f` at `x`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            y[i] = x[i] + h;
            let up = f(&y);
            y[i] = x[i] - h;
            let down = f(&y);
            y[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Floor on the error denominator. Central differences of an O(1) loss carry
/// roundoff near `ε/h ≈ 1e-10`, so gradients far below this scale (a saturated
/// cosine, say) are compared absolutely, at `FD_REL_TOL · GRAD_FLOOR`.
pub const GRAD_FLOOR: f64 = 1e-4;

/// `‖a − b‖ / max(‖a‖, ‖b‖, GRAD_FLOOR)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b)).max(GRAD_FLOOR);
    d / scale
}

/// A loss-level instance: correlated views keep the cosine losses away from
/// degenerate angles.
pub fn loss_instance(seed: u64, m: usize) -> (Vec<f64>, Vec<f64>, Predictor) {
    let mut r = rng(seed);
    let pred = random_predictor(&mut r, m);
    let z1 = normal_vec(&mut r, m);
    let z2: Vec<f64> = z1.iter().map(|v| v + 0.5 * standard_normal(&mut r)).collect();
    (z1, z2, pred)
}

/// Worst relative error of `grad_z1` and `grad_z2` against central
/// differences of the surrogate over `instances` seeded instances.
pub fn loss_fd_error(spec: &LossSpec, m: usize, instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let (z1, z2, pred) = loss_instance(seed * 31 + m as u64, m);
        let prepared = PreparedPredictor::new(spec, pred.p.clone()).unwrap();
        let g = eval_loss_and_grads(spec, &z1, &z2, &prepared).unwrap();
        assert!(g.grad_z1.iter().chain(&g.grad_z2).all(|v| v.is_finite()), "{spec} seed={seed}");
        let value = |a: &[f64], b: &[f64]| {
            if spec.symmetrize {
                surrogate_sym(spec, a, b, &z1, &z2, &pred.p, &pred.sqrt)
            } else {
                surrogate(spec, a, b, &z1, &z2, &pred.p, &pred.sqrt)
            }
        };
        let fd1 = central_diff(|a| value(a, &z2), &z1, FD_STEP);
        let fd2 = central_diff(|b| value(&z1, b), &z2, FD_STEP);
        worst = worst.max(rel_err(&g.grad_z1, &fd1)).max(rel_err(&g.grad_z2, &fd2));
    }
    worst
}

/// A small network with a six-sample augmented batch.
pub fn network_setup(
    seed: u64,
    m: usize,
    n: usize,
    act: Activation,
    predictor: PredictorState,
) -> (SiameseState, Vec<AugmentedPair>) {
    let mut r = rng(seed);
    let enc = EncoderParams::random(m, n, 1.0, act, &mut r);
    let data: Vec<Vec<f64>> = (0..6).map(|_| normal_vec(&mut r, n)).collect();
    let pairs = sample_batch(&data, 0.3, &mut r);
    (SiameseState::new(enc, predictor, None, 0.0, 0.1).unwrap(), pairs)
}

/// Batch loss as a function of the online weights, with everything behind a
/// stop-gradient (target outputs, frozen factors, the predictor) evaluated at
/// the original weights.
pub fn batch_surrogate(
    spec: &LossSpec,
    act: Activation,
    w0: &Matrix,
    w: &Matrix,
    pred: &Matrix,
    sqrt: &Matrix,
    pairs: &[AugmentedPair],
) -> f64 {
    let f = |weights: &Matrix, x: &[f64]| {
        forward(&EncoderParams { weights: weights.clone(), activation: act }, x).unwrap()
    };
    let asym = spec.symmetrized(false);
    let mut total = 0.0;
    let mut count = 0.0;
    for p in pairs {
        let orders: &[(&[f64], &[f64])] = if spec.symmetrize {
            &[(&p.x1, &p.x2), (&p.x2, &p.x1)]
        } else {
            &[(&p.x1, &p.x2)]
        };
        for &(xo, xt) in orders {
            let a0 = f(w0, xo);
            let b0 = f(w0, xt);
            let a = f(w, xo);
            let b = f(w, xt);
            total += surrogate(&asym, &a, &b, &a0, &b0, pred, sqrt);
            count += 1.0;
        }
    }
    total / count
}

/// Relative error of the encoder gradient against central differences on the
/// weights. `None` when the instance is degenerate: a ReLU encoder whose
/// outputs vanish for some sample under a cosine loss, or a pre-activation
/// within reach of the kink.
pub fn chain_rule_error(spec: LossSpec, act: Activation, m: usize, n: usize, seed: u64) -> Option<f64> {
    let (mut state, pairs) = network_setup(seed, m, n, act, PredictorState::closed_form(m, 0.5, 0.5));
    // differences straddling a ReLU kink measure a one-sided slope
    let near_kink = pairs
        .iter()
        .flat_map(|p| [&p.x1, &p.x2])
        .any(|x| state.online.weights.matvec(x).iter().any(|h| h.abs() < 1e-4));
    if act == Activation::Relu && near_kink {
        return None;
    }
    let grads = match batch_gradients(&mut state, &pairs, &spec) {
        Ok(g) => g,
        Err(NetworkError::Loss { source: LossError::NormUnderflow { .. }, .. }) if act == Activation::Relu => {
            return None
        }
        Err(e) => panic!("{spec}: {e}"),
    };
    let pred = state.predictor.current.clone();
    let sqrt = matrix_power(&SymMatrix::new(pred.clone()).unwrap(), 0.5)
        .unwrap()
        .into_matrix();
    let w0 = state.online.weights.clone();
    let fd = central_diff(
        |flat| {
            let w = Matrix::from_fn(m, n, |i, j| flat[i * n + j]);
            batch_surrogate(&spec, act, &w0, &w, &pred, &sqrt, &pairs)
        },
        w0.as_slice(),
        FD_STEP,
    );
    Some(rel_err(grads.encoder.as_slice(), &fd))
}

/// Worst chain-rule error over the first `valid` non-degenerate instances.
pub fn chain_rule_worst(spec: LossSpec, act: Activation, m: usize, n: usize, valid: usize) -> f64 {
    let mut worst = 0.0f64;
    let mut found = 0;
    let mut seed = 0;
    while found < valid {
        if let Some(e) = chain_rule_error(spec, act, m, n, seed) {
            worst = worst.max(e);
            found += 1;
        }
        seed += 1;
        assert!(seed < 10 * valid as u64, "too many degenerate instances for {spec} {act:?}");
    }
    worst
}
