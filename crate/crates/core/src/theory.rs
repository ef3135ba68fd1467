//! Predicted dynamics: per-mode representational ODEs, eigenvalue-level ODEs
//! for each loss configuration, a fixed-step RK4 integrator, and the
//! empirical NTK of a linear encoder.

use serde::Serialize;
use thiserror::Error;

use crate::linalg::{norm, Matrix};
use crate::losses::{LossSpec, Metric, Variant, NORM_FLOOR};
use crate::network::{Activation, EncoderParams};

pub const DEFAULT_DT: f64 = 0.01;
pub const MAX_STEPS: usize = 100_000;
/// States whose magnitude exceeds this are treated as diverged.
pub const BLOWUP_LIMIT: f64 = 1e12;
/// Largest Jacobian (M × MN entries) the NTK check will assemble.
pub const NTK_MAX_ENTRIES: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("norm of {which} underflowed ({norm:e})")]
    NormUnderflow { which: &'static str, norm: f64 },
    #[error("no closed eigenvalue-level dynamics for {0}")]
    Unsupported(String),
    #[error("invalid integration parameters: {0}")]
    InvalidStep(String),
    #[error("the NTK check needs a linear encoder")]
    NonLinearEncoder,
    #[error("NTK Jacobian too large ({0} entries)")]
    TooLarge(usize),
}

fn check_dims(expected: usize, others: &[usize]) -> Result<(), TheoryError> {
    for &found in others {
        if found != expected {
            return Err(TheoryError::DimMismatch { expected, found });
        }
    }
    Ok(())
}

/// `η λ_m (ẑ2_m − λ_m ẑ1_m)`
pub fn euc_exact_rhs(
    zhat1: &[f64],
    zhat2: &[f64],
    eigenvalues: &[f64],
    eta: f64,
) -> Result<Vec<f64>, TheoryError> {
    check_dims(eigenvalues.len(), &[zhat1.len(), zhat2.len()])?;
    Ok(eigenvalues
        .iter()
        .zip(zhat1.iter().zip(zhat2))
        .map(|(&l, (&a, &b))| eta * l * (b - l * a))
        .collect())
}

/// `η λ_m (1 − λ_m) ẑ_m`
pub fn euc_expected_rhs(zhat: &[f64], eigenvalues: &[f64], eta: f64) -> Result<Vec<f64>, TheoryError> {
    check_dims(eigenvalues.len(), &[zhat.len()])?;
    Ok(eigenvalues
        .iter()
        .zip(zhat)
        .map(|(&l, &z)| eta * l * (1.0 - l) * z)
        .collect())
}

/// Coupled cosine dynamics:
/// `η λ_m / (‖Dẑ1‖³ ‖ẑ2‖) · Σ_{k≠m} λ_k (λ_k ẑ1_k² ẑ2_m − λ_m ẑ1_m ẑ1_k ẑ2_k)`.
pub fn cos_exact_rhs(
    zhat1: &[f64],
    zhat2: &[f64],
    eigenvalues: &[f64],
    eta: f64,
) -> Result<Vec<f64>, TheoryError> {
    let m = eigenvalues.len();
    check_dims(m, &[zhat1.len(), zhat2.len()])?;
    let dz: Vec<f64> = eigenvalues.iter().zip(zhat1).map(|(l, a)| l * a).collect();
    let nd = norm(&dz);
    if !(nd > NORM_FLOOR) {
        return Err(TheoryError::NormUnderflow { which: "D zhat1", norm: nd });
    }
    let n2 = norm(zhat2);
    if !(n2 > NORM_FLOOR) {
        return Err(TheoryError::NormUnderflow { which: "zhat2", norm: n2 });
    }
    let scale = eta / (nd.powi(3) * n2);
    Ok((0..m)
        .map(|i| {
            let mut acc = 0.0;
            for k in (0..m).filter(|&k| k != i) {
                let lk = eigenvalues[k];
                acc += lk
                    * (lk * zhat1[k] * zhat1[k] * zhat2[i]
                        - eigenvalues[i] * zhat1[i] * zhat1[k] * zhat2[k]);
            }
            scale * eigenvalues[i] * acc
        })
        .collect())
}

/// Eigenvalue-level dynamics `dλ_m/dt` for each supported loss configuration.
pub fn table1_eigen_rhs(loss: &LossSpec, eigenvalues: &[f64], rate: f64) -> Result<Vec<f64>, TheoryError> {
    let l = eigenvalues;
    let per_mode = |f: &dyn Fn(f64) -> f64| l.iter().map(|&x| 2.0 * rate * f(x)).collect();
    // Σ_{k≠m} λ_k(λ_k − λ_m) = Σ_k λ_k² − λ_m Σ_k λ_k, the k = m term being zero.
    let s1: f64 = l.iter().sum();
    let s2: f64 = l.iter().map(|x| x * x).sum();
    let coupling = |x: f64| s2 - x * s1;
    match (loss.metric, loss.variant) {
        (Metric::Euclidean, Variant::Standard) => Ok(per_mode(&|x| x * x * (1.0 - x))),
        (Metric::Euclidean, Variant::NoStopGrad) => Ok(per_mode(&|x| -x * (1.0 - x).powi(2))),
        (Metric::Euclidean, Variant::NoPredictor) => Ok(vec![0.0; l.len()]),
        (Metric::Euclidean, Variant::Iso | Variant::IsoAlternative) => {
            Ok(per_mode(&|x| x * (1.0 - x)))
        }
        (Metric::Cosine, Variant::Standard) => Ok(per_mode(&|x| x * x * coupling(x))),
        (Metric::Cosine, Variant::Iso) => Ok(per_mode(&|x| x * coupling(x))),
        _ => Err(TheoryError::Unsupported(loss.label())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StateKind {
    Representation,
    Eigenvalues,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub kind: StateKind,
    /// What was integrated, e.g. a loss label.
    pub label: String,
    /// Set when integration stopped because the state blew up.
    pub diverged: bool,
}

impl TheoryTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> &[f64] {
        self.states.last().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

fn blown_up(v: &[f64]) -> bool {
    v.iter().any(|x| !x.is_finite() || x.abs() > BLOWUP_LIMIT)
}

fn axpy(y: &[f64], a: f64, x: &[f64]) -> Vec<f64> {
    y.iter().zip(x).map(|(yi, xi)| yi + a * xi).collect()
}

/// Classical fixed-step RK4 for an autonomous system. Integration stops early,
/// with `diverged` set, if the state or an intermediate slope leaves the
/// finite range or exceeds [`BLOWUP_LIMIT`].
pub fn integrate<F>(mut rhs: F, state0: &[f64], dt: f64, steps: usize) -> Result<TheoryTrajectory, TheoryError>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, TheoryError>,
{
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(TheoryError::InvalidStep(format!("dt must be positive, got {dt}")));
    }
    if steps == 0 || steps > MAX_STEPS {
        return Err(TheoryError::InvalidStep(format!(
            "steps must lie in 1..={MAX_STEPS}, got {steps}"
        )));
    }
    let n = state0.len();
    let mut traj = TheoryTrajectory {
        times: vec![0.0],
        states: vec![state0.to_vec()],
        kind: StateKind::Other,
        label: String::new(),
        diverged: blown_up(state0),
    };
    if traj.diverged {
        return Ok(traj);
    }
    let mut y = state0.to_vec();
    for step in 1..=steps {
        let k1 = rhs(&y)?;
        check_dims(n, &[k1.len()])?;
        let k2 = rhs(&axpy(&y, 0.5 * dt, &k1))?;
        let k3 = rhs(&axpy(&y, 0.5 * dt, &k2))?;
        let k4 = rhs(&axpy(&y, dt, &k3))?;
        let next: Vec<f64> = (0..n)
            .map(|i| y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect();
        if blown_up(&next) || [&k1, &k2, &k3, &k4].iter().any(|k| blown_up(k)) {
            traj.diverged = true;
            break;
        }
        y = next;
        traj.times.push(step as f64 * dt);
        traj.states.push(y.clone());
    }
    Ok(traj)
}

/// Integrates [`table1_eigen_rhs`] from `lambda0`.
pub fn integrate_table1(
    loss: &LossSpec,
    lambda0: &[f64],
    rate: f64,
    dt: f64,
    steps: usize,
) -> Result<TheoryTrajectory, TheoryError> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(TheoryError::InvalidStep(format!("rate must be positive, got {rate}")));
    }
    table1_eigen_rhs(loss, lambda0, rate)?;
    let mut traj = integrate(|l| table1_eigen_rhs(loss, l, rate), lambda0, dt, steps)?;
    traj.kind = StateKind::Eigenvalues;
    traj.label = loss.label();
    Ok(traj)
}

/// Empirical NTK block `∇_W(Uᵀz_i) ∇_W(Uᵀz_j)ᵀ` for a linear encoder, built
/// from the explicit M × MN Jacobians. `rotation` is the M×M matrix `U`.
pub fn ntk_block(
    enc: &EncoderParams,
    x_i: &[f64],
    x_j: &[f64],
    rotation: &Matrix,
) -> Result<Matrix, TheoryError> {
    if enc.activation != Activation::Linear {
        return Err(TheoryError::NonLinearEncoder);
    }
    let (m, n) = (enc.output_dim(), enc.input_dim());
    check_dims(n, &[x_i.len(), x_j.len()])?;
    check_dims(m, &[rotation.rows(), rotation.cols()])?;
    let entries = m * m * n;
    if entries > NTK_MAX_ENTRIES {
        return Err(TheoryError::TooLarge(entries));
    }
    // u_p = Σ_a U_ap (W x)_a, so ∂u_p/∂W_ab = U_ap x_b (parameters in row-major order).
    let jacobian = |x: &[f64]| Matrix::from_fn(m, m * n, |p, idx| rotation[(idx / n, p)] * x[idx % n]);
    let ji = jacobian(x_i);
    let jj = jacobian(x_j);
    Ok(ji.matmul(&jj.transpose()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(metric: Metric, variant: Variant) -> LossSpec {
        LossSpec::new(metric, variant)
    }

    #[test]
    fn euclidean_rhs_examples() {
        assert_eq!(euc_exact_rhs(&[0.3, -1.0], &[0.3, -1.0], &[1.0, 1.0], 0.7).unwrap(), vec![0.0, 0.0]);
        assert_eq!(euc_exact_rhs(&[1.0], &[1.0], &[0.5], 1.0).unwrap(), vec![0.25]);
        assert_eq!(euc_exact_rhs(&[2.0], &[-3.0], &[0.0], 1.0).unwrap(), vec![0.0]);
        assert_eq!(euc_expected_rhs(&[1.0], &[2.0], 1.0).unwrap(), vec![-2.0]);
        assert_eq!(euc_expected_rhs(&[0.4], &[1.0], 1.0).unwrap(), vec![0.0]);
        assert_eq!(euc_expected_rhs(&[0.0], &[0.3], 1.0).unwrap(), vec![0.0]);
        assert!(euc_exact_rhs(&[1.0], &[1.0, 2.0], &[1.0], 1.0).is_err());
    }

    #[test]
    fn cosine_rhs_examples() {
        assert_eq!(cos_exact_rhs(&[0.7], &[-0.2], &[1.3], 1.0).unwrap(), vec![0.0]);
        let z = [0.3, -0.8, 1.1];
        let r = cos_exact_rhs(&z, &z, &[0.6, 0.6, 0.6], 0.5).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-15));
        assert!(matches!(
            cos_exact_rhs(&[0.0, 0.0], &[1.0, 0.0], &[1.0, 1.0], 1.0),
            Err(TheoryError::NormUnderflow { which: "D zhat1", .. })
        ));
    }

    #[test]
    fn regime_fixed_points_and_values() {
        let es = spec(Metric::Euclidean, Variant::Standard);
        assert_eq!(table1_eigen_rhs(&es, &[1.0, 1.0], 1.0).unwrap(), vec![0.0, 0.0]);
        assert_eq!(table1_eigen_rhs(&es, &[0.5], 1.0).unwrap(), vec![0.25]);
        for variant in [Variant::NoStopGrad, Variant::Iso] {
            let r = table1_eigen_rhs(&spec(Metric::Euclidean, variant), &[1.0, 1.0, 1.0], 2.0).unwrap();
            assert!(r.iter().all(|v| *v == 0.0));
        }
        for variant in [Variant::Standard, Variant::Iso] {
            let r = table1_eigen_rhs(&spec(Metric::Cosine, variant), &[0.7, 0.7], 1.0).unwrap();
            assert!(r.iter().all(|v| v.abs() < 1e-15));
        }
        for variant in [Variant::NoStopGrad, Variant::NoPredictor] {
            assert!(matches!(
                table1_eigen_rhs(&spec(Metric::Cosine, variant), &[1.0], 1.0),
                Err(TheoryError::Unsupported(_))
            ));
        }
    }

    #[test]
    fn cosine_coupling_matches_explicit_sum() {
        let l = [2.0, 0.3, 0.9, 1.4];
        let r = table1_eigen_rhs(&spec(Metric::Cosine, Variant::Standard), &l, 0.5).unwrap();
        for m in 0..l.len() {
            let s: f64 = (0..l.len())
                .filter(|&k| k != m)
                .map(|k| l[k] * (l[k] - l[m]))
                .sum();
            assert!((r[m] - l[m] * l[m] * s).abs() < 1e-12);
        }
    }

    #[test]
    fn sign_structure() {
        let es = spec(Metric::Euclidean, Variant::Standard);
        let l = [0.1, 0.5, 0.99, 1.01, 2.0];
        let r = table1_eigen_rhs(&es, &l, 1.0).unwrap();
        for (x, v) in l.iter().zip(&r) {
            assert_eq!(*v > 0.0, *x > 0.0 && *x < 1.0);
        }
        let cs = spec(Metric::Cosine, Variant::Standard);
        let r = table1_eigen_rhs(&cs, &[5.0, 0.4, 0.3, 0.2], 1.0).unwrap();
        assert!(r[0] < 0.0);
        assert!(r[1..].iter().all(|v| *v > 0.0));
    }

    #[test]
    fn rk4_exponential_decay() {
        let t = integrate(|x| Ok(vec![-x[0]]), &[1.0], 0.01, 100).unwrap();
        assert!((t.last()[0] - (-1.0f64).exp()).abs() < 1e-6);
        assert!((t.times[100] - 1.0).abs() < 1e-12);
        assert!(!t.diverged);
    }

    #[test]
    fn rk4_fourth_order() {
        let err = |dt: f64, steps: usize| {
            let t = integrate(|x| Ok(vec![-x[0]]), &[1.0], dt, steps).unwrap();
            (t.last()[0] - (-1.0f64).exp()).abs()
        };
        let ratio = err(0.1, 10) / err(0.05, 20);
        assert!((ratio - 16.0).abs() < 1.0, "ratio={ratio}");
    }

    #[test]
    fn zero_rhs_is_constant() {
        let t = integrate(|x| Ok(vec![0.0; x.len()]), &[0.3, 2.0], 0.01, 50).unwrap();
        assert!(t.states.iter().all(|s| s == &vec![0.3, 2.0]));
    }

    #[test]
    fn blowup_truncates() {
        let t = integrate(|x| Ok(vec![x[0] * x[0]]), &[1.0], 0.01, 10_000).unwrap();
        assert!(t.diverged);
        assert!(t.len() < 10_001);
        assert!(t.states.iter().all(|s| s[0].is_finite()));
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(integrate(|x| Ok(x.to_vec()), &[1.0], 0.0, 10).is_err());
        assert!(integrate(|x| Ok(x.to_vec()), &[1.0], 0.01, MAX_STEPS + 1).is_err());
    }

    #[test]
    fn scalar_expected_dynamics_approach_one() {
        // one mode with λ = ẑ²
        let t = integrate(
            |z| {
                let l = z[0] * z[0];
                euc_expected_rhs(z, &[l], 1.0)
            },
            &[0.5],
            0.01,
            5_000,
        )
        .unwrap();
        let lambdas: Vec<f64> = t.states.iter().map(|z| z[0] * z[0]).collect();
        assert!(lambdas.windows(2).all(|w| w[1] >= w[0]));
        assert!((lambdas.last().unwrap() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn ntk_rejects_relu() {
        let enc = EncoderParams {
            weights: Matrix::zeros(2, 2),
            activation: Activation::Relu,
        };
        assert_eq!(
            ntk_block(&enc, &[1.0, 0.0], &[1.0, 0.0], &Matrix::identity(2)),
            Err(TheoryError::NonLinearEncoder)
        );
    }

    #[test]
    fn ntk_orthogonal_inputs_give_zero() {
        let enc = EncoderParams {
            weights: Matrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64),
            activation: Activation::Linear,
        };
        let k = ntk_block(&enc, &[1.0, 0.0], &[0.0, 1.0], &Matrix::identity(3)).unwrap();
        assert!(k.max_abs() < 1e-12);
        let k = ntk_block(&enc, &[0.6, 0.8], &[0.6, 0.8], &Matrix::identity(3)).unwrap();
        assert!(k.sub(&Matrix::identity(3)).max_abs() < 1e-12);
    }
}
