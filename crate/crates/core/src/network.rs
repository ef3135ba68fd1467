//! Toy Siamese network: a single-layer encoder, a predictor that is either set
//! in closed form from the representation correlation matrix, trained by
//! gradient descent, or fixed to the identity, and an optional EMA target.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::alignment_scores_from;
use crate::linalg::{
    batch_correlation, ema_update, matrix_power_with_decomp, norm, sym_eig, LinalgError, Matrix,
    SymEigDecomp, SymMatrix,
};
use crate::losses::{eval_loss_and_grads, LossError, LossSpec, PreparedPredictor, Variant};
use crate::synth_data::{standard_normal, AugmentedPair, RunRng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("loss evaluation failed at pair {pair}: {source}")]
    Loss { pair: usize, source: LossError },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("predictor refresh requires closed-form mode")]
    NotClosedForm,
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// M×N
    pub weights: Matrix,
    pub activation: Activation,
}

impl EncoderParams {
    /// Entries drawn i.i.d. from `N(0, (init_scale/√N)²)`.
    pub fn random(
        output_dim: usize,
        input_dim: usize,
        init_scale: f64,
        activation: Activation,
        rng: &mut RunRng,
    ) -> Self {
        let std = init_scale / (input_dim as f64).sqrt();
        let weights = Matrix::from_fn(output_dim, input_dim, |_, _| std * standard_normal(rng));
        Self {
            weights,
            activation,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    fn pre_activation(&self, x: &[f64]) -> Result<Vec<f64>, NetworkError> {
        if x.len() != self.input_dim() {
            return Err(NetworkError::DimMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        Ok(self.weights.matvec(x))
    }
}

/// `W x`, or `max(W x, 0)` for the ReLU encoder.
pub fn forward(enc: &EncoderParams, x: &[f64]) -> Result<Vec<f64>, NetworkError> {
    let mut h = enc.pre_activation(x)?;
    if enc.activation == Activation::Relu {
        h.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    ClosedForm,
    Trainable,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub mode: PredictorKind,
    /// Exponent applied to the correlation spectrum (0.5 DirectPred, 1 DirectCopy).
    pub alpha: f64,
    /// Moving-average coefficient of the correlation estimate.
    pub corr_tau: f64,
    /// Std of the noise added to the identity when initializing a trainable predictor.
    pub init_noise: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            mode: PredictorKind::ClosedForm,
            alpha: 0.5,
            corr_tau: 0.5,
            init_noise: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub enum PredictorMode {
    ClosedForm { alpha: f64, corr_tau: f64 },
    Trainable,
    Identity,
}

#[derive(Debug, Clone)]
pub struct PredictorState {
    pub mode: PredictorMode,
    /// Running correlation estimate; seeded from the first batch it sees.
    pub corr_estimate: Option<SymMatrix>,
    pub current: Matrix,
    decomp: Option<SymEigDecomp>,
}

impl PredictorState {
    pub fn closed_form(dim: usize, alpha: f64, corr_tau: f64) -> Self {
        Self {
            mode: PredictorMode::ClosedForm { alpha, corr_tau },
            corr_estimate: None,
            current: Matrix::identity(dim),
            decomp: None,
        }
    }

    /// Closed-form predictor with an existing correlation estimate.
    pub fn closed_form_from(estimate: SymMatrix, alpha: f64, corr_tau: f64) -> Result<Self, NetworkError> {
        let (current, decomp) = matrix_power_with_decomp(&estimate, alpha)?;
        Ok(Self {
            mode: PredictorMode::ClosedForm { alpha, corr_tau },
            corr_estimate: Some(estimate),
            current: current.into_matrix(),
            decomp: Some(decomp),
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mode: PredictorMode::Identity,
            corr_estimate: None,
            current: Matrix::identity(dim),
            decomp: None,
        }
    }

    pub fn trainable(matrix: Matrix) -> Self {
        Self {
            mode: PredictorMode::Trainable,
            corr_estimate: None,
            current: matrix,
            decomp: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.current.rows()
    }

    /// `corr_estimate ← ema(corr_estimate, C_batch, τ)`, then
    /// `current ← corr_estimate^α`.
    pub fn refresh<V: AsRef<[f64]>>(&mut self, z_batch: &[V]) -> Result<(), NetworkError> {
        if !matches!(self.mode, PredictorMode::ClosedForm { .. }) {
            return Err(NetworkError::NotClosedForm);
        }
        self.refresh_from_corr(batch_correlation(z_batch)?)
    }

    /// As [`PredictorState::refresh`], with the batch correlation already computed.
    pub fn refresh_from_corr(&mut self, batch: SymMatrix) -> Result<(), NetworkError> {
        let PredictorMode::ClosedForm { alpha, corr_tau } = self.mode else {
            return Err(NetworkError::NotClosedForm);
        };
        if batch.dim() != self.dim() {
            return Err(NetworkError::DimMismatch {
                expected: self.dim(),
                found: batch.dim(),
            });
        }
        let estimate = match &self.corr_estimate {
            Some(prev) => ema_update(prev, &batch, corr_tau)?,
            None => batch,
        };
        let (current, decomp) = matrix_power_with_decomp(&estimate, alpha)?;
        self.current = current.into_matrix();
        self.corr_estimate = Some(estimate);
        self.decomp = Some(decomp);
        Ok(())
    }

    /// Eigenvalues of the predictor, sorted descending. For a trainable
    /// (possibly asymmetric) predictor these are the eigenvalues of its
    /// symmetric part.
    pub fn eigenvalues(&self) -> Result<Vec<f64>, NetworkError> {
        match (&self.mode, &self.decomp) {
            (PredictorMode::ClosedForm { alpha, .. }, Some(d)) => {
                Ok(d.eigenvalues.iter().map(|l| l.powf(*alpha)).collect())
            }
            (PredictorMode::Identity, _) => Ok(vec![1.0; self.dim()]),
            _ => Ok(sym_eig(&SymMatrix::new(self.current.clone())?)?.eigenvalues),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub output_dim: usize,
    pub init_scale: f64,
    pub activation: Activation,
    pub predictor: PredictorConfig,
    /// EMA coefficient of the target encoder; absent means the target shares
    /// the online weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ema_tau: Option<f64>,
    pub weight_decay: f64,
    /// Absent means the metric's default (see [`default_learning_rate`]).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            output_dim: 10,
            init_scale: 1.0,
            activation: Activation::Linear,
            predictor: PredictorConfig::default(),
            ema_tau: None,
            weight_decay: 0.0,
            learning_rate: None,
        }
    }
}

pub fn default_learning_rate(loss: &LossSpec) -> f64 {
    match loss.metric {
        crate::losses::Metric::Euclidean => 0.1,
        crate::losses::Metric::Cosine => 0.5,
    }
}

#[derive(Debug, Clone)]
pub struct SiameseState {
    pub online: EncoderParams,
    pub target: Option<EncoderParams>,
    pub predictor: PredictorState,
    pub ema_tau: Option<f64>,
    pub weight_decay: f64,
    pub learning_rate: f64,
}

impl SiameseState {
    pub fn new(
        online: EncoderParams,
        predictor: PredictorState,
        ema_tau: Option<f64>,
        weight_decay: f64,
        learning_rate: f64,
    ) -> Result<Self, NetworkError> {
        if predictor.dim() != online.output_dim() {
            return Err(NetworkError::DimMismatch {
                expected: online.output_dim(),
                found: predictor.dim(),
            });
        }
        if let Some(tau) = ema_tau {
            if !(0.0..=1.0).contains(&tau) {
                return Err(NetworkError::InvalidConfig(format!("ema_tau {tau} outside [0, 1]")));
            }
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(NetworkError::InvalidConfig(format!(
                "weight_decay must be non-negative, got {weight_decay}"
            )));
        }
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(NetworkError::InvalidConfig(format!(
                "learning_rate must be non-negative, got {learning_rate}"
            )));
        }
        let target = ema_tau.map(|_| online.clone());
        Ok(Self {
            online,
            target,
            predictor,
            ema_tau,
            weight_decay,
            learning_rate,
        })
    }

    /// Initializes a state from a model config. Randomness is drawn from
    /// `rng` in a fixed order: encoder weights, then predictor noise.
    pub fn init(
        cfg: &ModelConfig,
        input_dim: usize,
        loss: &LossSpec,
        rng: &mut RunRng,
    ) -> Result<Self, NetworkError> {
        check_compatible(cfg, loss)?;
        let m = cfg.output_dim;
        let online = EncoderParams::random(m, input_dim, cfg.init_scale, cfg.activation, rng);
        // Without a predictor the loss ignores W_P; a closed-form one is still
        // maintained so its spectrum can be recorded.
        let predictor = match cfg.predictor.mode {
            PredictorKind::ClosedForm => {
                PredictorState::closed_form(m, cfg.predictor.alpha, cfg.predictor.corr_tau)
            }
            PredictorKind::Identity => PredictorState::identity(m),
            PredictorKind::Trainable => {
                let noise = cfg.predictor.init_noise;
                let mut w = Matrix::identity(m);
                w.as_mut_slice()
                    .iter_mut()
                    .for_each(|x| *x += noise * standard_normal(rng));
                PredictorState::trainable(w)
            }
        };
        let lr = cfg.learning_rate.unwrap_or_else(|| default_learning_rate(loss));
        Self::new(online, predictor, cfg.ema_tau, cfg.weight_decay, lr)
    }
}

/// Rejects model/loss combinations that have no meaning.
pub fn check_compatible(cfg: &ModelConfig, loss: &LossSpec) -> Result<(), NetworkError> {
    loss.validate()
        .map_err(|e| NetworkError::InvalidConfig(e.to_string()))?;
    if cfg.output_dim == 0 {
        return Err(NetworkError::InvalidConfig("output_dim must be positive".into()));
    }
    if !(cfg.init_scale > 0.0 && cfg.init_scale.is_finite()) {
        return Err(NetworkError::InvalidConfig("init_scale must be positive".into()));
    }
    let p = &cfg.predictor;
    if !(p.alpha >= 0.0 && p.alpha.is_finite()) {
        return Err(NetworkError::InvalidConfig("alpha must be non-negative".into()));
    }
    if !(0.0..=1.0).contains(&p.corr_tau) {
        return Err(NetworkError::InvalidConfig("corr_tau must lie in [0, 1]".into()));
    }
    if loss.variant == Variant::NoStopGrad && cfg.ema_tau.is_some() {
        return Err(NetworkError::InvalidConfig(
            "no_stop_grad needs the target to share the online weights (ema_tau absent)".into(),
        ));
    }
    if p.mode == PredictorKind::Trainable
        && loss.variant != Variant::NoPredictor
        && !loss.variant.trains_predictor()
    {
        return Err(NetworkError::InvalidConfig(format!(
            "{} freezes the prediction; use a closed_form or identity predictor",
            loss.label()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    /// Mean loss over the batch (and over both orderings when symmetrized).
    pub loss: f64,
    /// Frobenius norm of the mean encoder gradient.
    pub grad_norm: f64,
    /// Eigenvalues of this step's batch correlation of online outputs.
    pub corr_eigenvalues: Vec<f64>,
    pub predictor_eigenvalues: Vec<f64>,
    /// Alignment of the predictor with each eigenvector of the batch correlation.
    pub alignment: Vec<f64>,
    /// Batch mean of `|ẑ_m| / ‖ẑ‖` in the batch-correlation eigenbasis.
    pub chi: Vec<f64>,
}

struct BranchOutputs {
    z: Vec<f64>,
    mask: Option<Vec<bool>>,
}

fn run_branch(enc: &EncoderParams, x: &[f64]) -> Result<BranchOutputs, NetworkError> {
    let h = enc.pre_activation(x)?;
    Ok(match enc.activation {
        Activation::Linear => BranchOutputs { z: h, mask: None },
        Activation::Relu => {
            let mask: Vec<bool> = h.iter().map(|&v| v > 0.0).collect();
            let z = h.iter().map(|&v| v.max(0.0)).collect();
            BranchOutputs { z, mask: Some(mask) }
        }
    })
}

fn masked(g: &[f64], mask: &Option<Vec<bool>>) -> Vec<f64> {
    match mask {
        None => g.to_vec(),
        Some(m) => g
            .iter()
            .zip(m)
            .map(|(&v, &on)| if on { v } else { 0.0 })
            .collect(),
    }
}

/// Gradients of the batch loss with respect to the encoder and (if trainable)
/// the predictor, with the predictor refreshed from this batch.
pub struct BatchGradients {
    pub loss: f64,
    pub encoder: Matrix,
    pub predictor: Option<Matrix>,
    pub online_outputs: Vec<Vec<f64>>,
    /// Batch correlation of `online_outputs`.
    pub corr: SymMatrix,
}

/// Forward pass, predictor refresh, and gradient accumulation. The closed-form
/// predictor is refreshed first and then held constant.
pub fn batch_gradients(
    state: &mut SiameseState,
    pairs: &[AugmentedPair],
    loss: &LossSpec,
) -> Result<BatchGradients, NetworkError> {
    if pairs.is_empty() {
        return Err(NetworkError::EmptyBatch);
    }
    if loss.variant == Variant::NoStopGrad && state.target.is_some() {
        return Err(NetworkError::InvalidConfig(
            "no_stop_grad with an EMA target".into(),
        ));
    }
    let asym = loss.symmetrized(false);
    let orderings: &[(bool,)] = if loss.symmetrize { &[(false,), (true,)] } else { &[(false,)] };

    // online and target outputs for both views
    let mut online = Vec::with_capacity(pairs.len());
    let mut target = Vec::with_capacity(pairs.len());
    for p in pairs {
        let o1 = run_branch(&state.online, &p.x1)?;
        let o2 = run_branch(&state.online, &p.x2)?;
        let t = match &state.target {
            Some(t) => Some((run_branch(t, &p.x1)?.z, run_branch(t, &p.x2)?.z)),
            None => None,
        };
        online.push((o1, o2));
        target.push(t);
    }

    let mut online_outputs: Vec<Vec<f64>> = online.iter().map(|(a, _)| a.z.clone()).collect();
    if loss.symmetrize {
        online_outputs.extend(online.iter().map(|(_, b)| b.z.clone()));
    }
    let corr = batch_correlation(&online_outputs)?;
    if matches!(state.predictor.mode, PredictorMode::ClosedForm { .. }) {
        state.predictor.refresh_from_corr(corr.clone())?;
    }
    let prepared = PreparedPredictor::new(&asym, state.predictor.current.clone())
        .map_err(|source| NetworkError::Loss { pair: 0, source })?;

    let m = state.online.output_dim();
    let n = state.online.input_dim();
    let mut grad_w = Matrix::zeros(m, n);
    let mut grad_p = match state.predictor.mode {
        PredictorMode::Trainable => Some(Matrix::zeros(m, m)),
        _ => None,
    };
    let weight = 1.0 / (pairs.len() * orderings.len()) as f64;
    let mut loss_sum = 0.0;

    for (idx, (pair, ((o1, o2), t))) in pairs.iter().zip(online.iter().zip(&target)).enumerate() {
        for &(swapped,) in orderings {
            let (on, x_on, x_tg, tg_online) = if swapped {
                (o2, &pair.x2, &pair.x1, o1)
            } else {
                (o1, &pair.x1, &pair.x2, o2)
            };
            let z_tg: &[f64] = match t {
                Some((t1, t2)) => {
                    if swapped {
                        t1
                    } else {
                        t2
                    }
                }
                None => &tg_online.z,
            };
            let g = eval_loss_and_grads(&asym, &on.z, z_tg, &prepared)
                .map_err(|source| NetworkError::Loss { pair: idx, source })?;
            loss_sum += g.value;
            grad_w.add_outer(weight, &masked(&g.grad_z1, &on.mask), x_on);
            if loss.variant == Variant::NoStopGrad {
                grad_w.add_outer(weight, &masked(&g.grad_z2, &tg_online.mask), x_tg);
            }
            if let (Some(gp), Some(dp)) = (grad_p.as_mut(), g.grad_prediction.as_ref()) {
                gp.add_outer(weight, dp, &on.z);
            }
        }
    }

    Ok(BatchGradients {
        loss: loss_sum * weight,
        encoder: grad_w,
        predictor: grad_p,
        online_outputs,
        corr,
    })
}

/// One full-batch gradient-descent step:
/// forward, predictor refresh, gradients, encoder (and predictor) update, EMA.
pub fn train_step(
    state: &mut SiameseState,
    pairs: &[AugmentedPair],
    loss: &LossSpec,
) -> Result<StepMetrics, NetworkError> {
    let grads = batch_gradients(state, pairs, loss)?;
    let decomp = sym_eig(&grads.corr)?;
    let alignment = alignment_scores_from(&decomp, &state.predictor.current)?;
    let chi = relative_contributions(&decomp, &grads.online_outputs);
    let predictor_eigenvalues = state.predictor.eigenvalues()?;
    apply_gradients(state, &grads);
    Ok(StepMetrics {
        loss: grads.loss,
        grad_norm: grads.encoder.frobenius(),
        corr_eigenvalues: decomp.eigenvalues,
        predictor_eigenvalues,
        alignment,
        chi,
    })
}

/// Encoder (and trainable predictor) descent step followed by the EMA update.
pub fn apply_gradients(state: &mut SiameseState, grads: &BatchGradients) {
    let eta = state.learning_rate;
    let wd = state.weight_decay;
    let mut update = grads.encoder.clone();
    if wd > 0.0 {
        update.blend_in_place(1.0, wd, &state.online.weights);
    }
    state.online.weights.blend_in_place(1.0, -eta, &update);
    if let Some(gp) = &grads.predictor {
        state.predictor.current.blend_in_place(1.0, -eta, gp);
    }
    if let (Some(target), Some(tau)) = (state.target.as_mut(), state.ema_tau) {
        // θ_t + (1−τ)(θ_o − θ_t), exact when the branches coincide
        let diff = state.online.weights.sub(&target.weights);
        target.weights.blend_in_place(1.0, 1.0 - tau, &diff);
    }
}

/// Batch mean of `|ẑ_m| / ‖ẑ‖` with `ẑ = Uᵀz`. Zero vectors are skipped.
pub fn relative_contributions(decomp: &SymEigDecomp, batch: &[Vec<f64>]) -> Vec<f64> {
    let m = decomp.dim();
    let mut acc = vec![0.0; m];
    let mut count = 0usize;
    for z in batch {
        let zn = norm(z);
        if zn <= 0.0 {
            continue;
        }
        let zh = decomp.to_eigenbasis(z);
        for (a, v) in acc.iter_mut().zip(&zh) {
            *a += v.abs() / zn;
        }
        count += 1;
    }
    if count > 0 {
        acc.iter_mut().for_each(|a| *a /= count as f64);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::Metric;
    use crate::synth_data::{sample_batch, stream_rng};

    #[test]
    fn forward_examples() {
        let enc = EncoderParams {
            weights: Matrix::identity(2),
            activation: Activation::Linear,
        };
        assert_eq!(forward(&enc, &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
        let relu = EncoderParams {
            weights: Matrix::from_diag(&[-1.0, 1.0]),
            activation: Activation::Relu,
        };
        assert_eq!(forward(&relu, &[1.0, 2.0]).unwrap(), vec![0.0, 2.0]);
        assert!(matches!(
            forward(&enc, &[1.0]),
            Err(NetworkError::DimMismatch { expected: 2, found: 1 })
        ));
    }

    #[test]
    fn forward_matches_dot_product_loop() {
        let mut rng = stream_rng(3, 1);
        let enc = EncoderParams::random(4, 6, 1.0, Activation::Linear, &mut rng);
        let x: Vec<f64> = (0..6).map(|i| i as f64 * 0.3 - 1.0).collect();
        let z = forward(&enc, &x).unwrap();
        for i in 0..4 {
            let mut acc = 0.0;
            for j in 0..6 {
                acc += enc.weights[(i, j)] * x[j];
            }
            assert!((z[i] - acc).abs() < 1e-14);
        }
    }

    #[test]
    fn refresh_one_hot_batch() {
        let mut p = PredictorState::closed_form(3, 1.0, 0.0);
        let batch = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        p.refresh(&batch).unwrap();
        let expected = Matrix::identity(3).scaled(1.0 / 3.0);
        assert!(p.current.sub(&expected).max_abs() < 1e-15);
    }

    #[test]
    fn refresh_with_frozen_estimate() {
        let mut p = PredictorState::closed_form_from(SymMatrix::from_diag(&[4.0, 9.0]), 0.5, 1.0)
            .unwrap();
        p.refresh(&[vec![0.1, 0.2]]).unwrap();
        assert!(p.current.sub(&Matrix::from_diag(&[2.0, 3.0])).max_abs() < 1e-14);
    }

    #[test]
    fn refresh_spectrum_is_powered_estimate() {
        let mut rng = stream_rng(8, 0);
        let mut p = PredictorState::closed_form(4, 0.5, 0.5);
        for _ in 0..3 {
            let batch: Vec<Vec<f64>> = (0..20)
                .map(|_| (0..4).map(|_| standard_normal(&mut rng)).collect())
                .collect();
            p.refresh(&batch).unwrap();
        }
        let est = sym_eig(p.corr_estimate.as_ref().unwrap()).unwrap();
        let cur = sym_eig(&SymMatrix::new(p.current.clone()).unwrap()).unwrap();
        for (s, l) in est.eigenvalues.iter().zip(&cur.eigenvalues) {
            assert!((s.powf(0.5) - l).abs() < 1e-9);
        }
        assert_eq!(PredictorState::identity(2).refresh(&[vec![1.0, 0.0]]), Err(NetworkError::NotClosedForm));
    }

    #[test]
    fn zero_learning_rate_only_refreshes_predictor() {
        let mut rng = stream_rng(1, 1);
        let loss = LossSpec::new(Metric::Euclidean, Variant::Standard).symmetrized(true);
        let cfg = ModelConfig {
            learning_rate: Some(0.0),
            ema_tau: Some(0.9),
            ..ModelConfig::default()
        };
        let mut state = SiameseState::init(&cfg, 15, &loss, &mut rng).unwrap();
        let before = state.clone();
        let data: Vec<Vec<f64>> = (0..32)
            .map(|_| (0..15).map(|_| standard_normal(&mut rng)).collect())
            .collect();
        let pairs = sample_batch(&data, 0.1, &mut rng);
        train_step(&mut state, &pairs, &loss).unwrap();
        assert_eq!(state.online, before.online);
        assert_eq!(state.target, before.target);
        assert_ne!(state.predictor.current, before.predictor.current);
    }

    #[test]
    fn incompatible_configs_rejected() {
        let nosg = LossSpec::new(Metric::Cosine, Variant::NoStopGrad);
        let cfg = ModelConfig {
            ema_tau: Some(0.99),
            ..ModelConfig::default()
        };
        assert!(check_compatible(&cfg, &nosg).is_err());
        let iso = LossSpec::new(Metric::Cosine, Variant::Iso);
        let mut cfg = ModelConfig::default();
        cfg.predictor.mode = PredictorKind::Trainable;
        assert!(check_compatible(&cfg, &iso).is_err());
    }

    #[test]
    fn step_is_deterministic() {
        let loss = LossSpec::new(Metric::Cosine, Variant::Iso).symmetrized(true);
        let make = || {
            let mut rng = stream_rng(4, 1);
            let mut state =
                SiameseState::init(&ModelConfig::default(), 15, &loss, &mut rng).unwrap();
            let data: Vec<Vec<f64>> = (0..16)
                .map(|_| (0..15).map(|_| standard_normal(&mut rng)).collect())
                .collect();
            let pairs = sample_batch(&data, 0.1, &mut rng);
            let m = train_step(&mut state, &pairs, &loss).unwrap();
            (state.online, m)
        };
        assert_eq!(make(), make());
    }
}
