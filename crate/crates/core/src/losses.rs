//! Asymmetric Siamese losses and their stop-gradient-aware gradients.
//!
//! Every gradient here is written out by hand. A stop-gradient is realized by
//! treating the frozen subexpression as a constant, so `grad_z2` is zero unless
//! the variant removes the stop-gradient.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dot, matrix_power, norm, LinalgError, Matrix, SymMatrix};

/// Norms below this are a hard error in cosine denominators.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("norm of {which} underflowed ({norm:e}) in cosine denominator")]
    NormUnderflow { which: &'static str, norm: f64 },
    #[error("invalid loss spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: z1 has {z1}, z2 has {z2}, predictor is {pred}x{pred}")]
    DimMismatch { z1: usize, z2: usize, pred: usize },
    #[error("cosine IsoLoss needs a symmetric positive semidefinite predictor")]
    AsymmetricPredictor,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Standard,
    NoStopGrad,
    NoPredictor,
    Iso,
    IsoAlternative,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        }
    }
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Standard => "standard",
            Variant::NoStopGrad => "no_stop_grad",
            Variant::NoPredictor => "no_predictor",
            Variant::Iso => "iso",
            Variant::IsoAlternative => "iso_alternative",
        }
    }

    /// True when the loss depends on the predictor's output in a way a
    /// trainable predictor can receive gradient through.
    pub fn trains_predictor(self) -> bool {
        matches!(self, Variant::Standard | Variant::NoStopGrad)
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub metric: Metric,
    pub variant: Variant,
    #[serde(default = "default_true")]
    pub symmetrize: bool,
}

impl LossSpec {
    pub fn new(metric: Metric, variant: Variant) -> Self {
        Self {
            metric,
            variant,
            symmetrize: false,
        }
    }

    pub fn symmetrized(mut self, on: bool) -> Self {
        self.symmetrize = on;
        self
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if self.variant == Variant::IsoAlternative && self.metric != Metric::Euclidean {
            return Err(LossError::InvalidSpec(
                "iso_alternative is only defined for the euclidean metric".into(),
            ));
        }
        Ok(())
    }

    /// `metric/variant`, e.g. `cosine/no_stop_grad`.
    pub fn label(&self) -> String {
        format!("{}/{}", self.metric.as_str(), self.variant.as_str())
    }

    /// The eight configurations of the regime table (iso_alternative excluded).
    pub fn table_rows() -> Vec<LossSpec> {
        let mut rows = Vec::new();
        for metric in [Metric::Euclidean, Metric::Cosine] {
            for variant in [
                Variant::Standard,
                Variant::NoStopGrad,
                Variant::NoPredictor,
                Variant::Iso,
            ] {
                rows.push(LossSpec::new(metric, variant));
            }
        }
        rows
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for LossSpec {
    type Err = LossError;

    /// Parses `metric/variant`; symmetrization defaults to on.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (m, v) = s
            .split_once('/')
            .ok_or_else(|| LossError::InvalidSpec(format!("expected metric/variant, got {s:?}")))?;
        let metric = match m.trim() {
            "euclidean" | "euc" => Metric::Euclidean,
            "cosine" | "cos" => Metric::Cosine,
            other => return Err(LossError::InvalidSpec(format!("unknown metric {other:?}"))),
        };
        let variant = match v.trim() {
            "standard" => Variant::Standard,
            "no_stop_grad" | "nosg" => Variant::NoStopGrad,
            "no_predictor" | "nopred" => Variant::NoPredictor,
            "iso" => Variant::Iso,
            "iso_alternative" => Variant::IsoAlternative,
            other => return Err(LossError::InvalidSpec(format!("unknown variant {other:?}"))),
        };
        let spec = LossSpec::new(metric, variant).symmetrized(true);
        spec.validate()?;
        Ok(spec)
    }
}

/// Predictor matrix prepared for loss evaluation. For cosine IsoLoss the
/// matrix square root is computed once here and reused for every sample.
#[derive(Debug, Clone)]
pub struct PreparedPredictor {
    matrix: Matrix,
    sqrt: Option<Matrix>,
}

impl PreparedPredictor {
    pub fn new(spec: &LossSpec, matrix: Matrix) -> Result<Self, LossError> {
        spec.validate()?;
        if !matrix.is_square() {
            return Err(LinalgError::NotSquare {
                rows: matrix.rows(),
                cols: matrix.cols(),
            }
            .into());
        }
        let sqrt = if spec.metric == Metric::Cosine && spec.variant == Variant::Iso {
            let asym = matrix.sub(&matrix.transpose()).max_abs();
            if asym > 1e-12 * matrix.max_abs().max(1.0) {
                return Err(LossError::AsymmetricPredictor);
            }
            let sym = SymMatrix::new(matrix.clone())?;
            Some(matrix_power(&sym, 0.5)?.into_matrix())
        } else {
            None
        };
        Ok(Self { matrix, sqrt })
    }

    pub fn from_sym(spec: &LossSpec, m: &SymMatrix) -> Result<Self, LossError> {
        Self::new(spec, m.as_matrix().clone())
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub value: f64,
    pub grad_z1: Vec<f64>,
    /// Zero unless the variant lets gradient reach the target branch.
    pub grad_z2: Vec<f64>,
    /// `∂L/∂(W_P z1)` for variants where the prediction is not frozen;
    /// `None` otherwise and for symmetrized evaluations.
    pub grad_prediction: Option<Vec<f64>>,
}

fn check_norm(which: &'static str, v: &[f64]) -> Result<f64, LossError> {
    let n = norm(v);
    if n > NORM_FLOOR && n.is_finite() {
        Ok(n)
    } else {
        Err(LossError::NormUnderflow { which, norm: n })
    }
}

fn axpy(a: f64, x: &[f64], y: &[f64], b: f64) -> Vec<f64> {
    x.iter().zip(y).map(|(xi, yi)| a * xi + b * yi).collect()
}

/// Loss value and representational gradients for one pair.
pub fn eval_loss_and_grads(
    spec: &LossSpec,
    z1: &[f64],
    z2: &[f64],
    predictor: &PreparedPredictor,
) -> Result<LossGrads, LossError> {
    spec.validate()?;
    let m = predictor.dim();
    if z1.len() != m || z2.len() != m {
        return Err(LossError::DimMismatch {
            z1: z1.len(),
            z2: z2.len(),
            pred: m,
        });
    }
    if !spec.symmetrize {
        return eval_asymmetric(spec, z1, z2, predictor);
    }
    let a = eval_asymmetric(spec, z1, z2, predictor)?;
    let b = eval_asymmetric(spec, z2, z1, predictor)?;
    Ok(LossGrads {
        value: 0.5 * (a.value + b.value),
        grad_z1: axpy(0.5, &a.grad_z1, &b.grad_z2, 0.5),
        grad_z2: axpy(0.5, &a.grad_z2, &b.grad_z1, 0.5),
        grad_prediction: None,
    })
}

fn eval_asymmetric(
    spec: &LossSpec,
    z1: &[f64],
    z2: &[f64],
    predictor: &PreparedPredictor,
) -> Result<LossGrads, LossError> {
    let w = predictor.matrix();
    let zeros = vec![0.0; z1.len()];
    match spec.metric {
        Metric::Euclidean => {
            let (value, grad_z1, grad_z2, grad_prediction) = match spec.variant {
                Variant::Standard | Variant::NoStopGrad => {
                    let p = w.matvec(z1);
                    let r = axpy(1.0, &p, z2, -1.0);
                    let value = 0.5 * dot(&r, &r);
                    let g1 = w.tr_matvec(&r);
                    let g2 = if spec.variant == Variant::NoStopGrad {
                        r.iter().map(|x| -x).collect()
                    } else {
                        zeros
                    };
                    (value, g1, g2, Some(r))
                }
                Variant::NoPredictor => {
                    let r = axpy(1.0, z1, z2, -1.0);
                    (0.5 * dot(&r, &r), r, zeros, None)
                }
                Variant::Iso => {
                    // ½‖z1 − SG(z2 + z1 − W z1)‖²: the frozen target leaves an
                    // identity Jacobian on z1.
                    let p = w.matvec(z1);
                    let r = axpy(1.0, &p, z2, -1.0);
                    (0.5 * dot(&r, &r), r, zeros, None)
                }
                Variant::IsoAlternative => {
                    // SG(W z1 − z2) · (z1 − SG(z2))
                    let p = w.matvec(z1);
                    let r = axpy(1.0, &p, z2, -1.0);
                    let d = axpy(1.0, z1, z2, -1.0);
                    (dot(&r, &d), r, zeros, None)
                }
            };
            Ok(LossGrads {
                value,
                grad_z1,
                grad_z2,
                grad_prediction,
            })
        }
        Metric::Cosine => {
            let n1 = check_norm("z1", z1)?;
            let n2 = check_norm("z2", z2)?;
            match spec.variant {
                Variant::Standard | Variant::NoStopGrad => {
                    let p = w.matvec(z1);
                    let np = check_norm("W_P z1", &p)?;
                    let c = dot(&p, z2);
                    let value = -c / (np * n2);
                    // ∂L/∂p = −z2/(‖p‖‖z2‖) + (pᵀz2) p/(‖p‖³‖z2‖)
                    let dp = axpy(-1.0 / (np * n2), z2, &p, c / (np.powi(3) * n2));
                    let g1 = w.tr_matvec(&dp);
                    let g2 = if spec.variant == Variant::NoStopGrad {
                        axpy(-1.0 / (np * n2), &p, z2, c / (np * n2.powi(3)))
                    } else {
                        zeros
                    };
                    Ok(LossGrads {
                        value,
                        grad_z1: g1,
                        grad_z2: g2,
                        grad_prediction: Some(dp),
                    })
                }
                Variant::NoPredictor => {
                    let c = dot(z1, z2);
                    let value = -c / (n1 * n2);
                    let g1 = axpy(-1.0 / (n1 * n2), z2, z1, c / (n1.powi(3) * n2));
                    Ok(LossGrads {
                        value,
                        grad_z1: g1,
                        grad_z2: zeros,
                        grad_prediction: None,
                    })
                }
                Variant::Iso => {
                    let sqrt = predictor
                        .sqrt
                        .as_ref()
                        .ok_or(LossError::AsymmetricPredictor)?;
                    let p = w.matvec(z1);
                    let np = check_norm("W_P z1", &p)?;
                    let lead = 1.0 / (np * n2);
                    let k = dot(&p, z2) / (np.powi(3) * n2);
                    let s = sqrt.matvec(z1);
                    let value = -dot(z1, z2) * lead + 0.5 * k * dot(&s, &s);
                    let g1 = axpy(-lead, z2, &sqrt.tr_matvec(&s), k);
                    Ok(LossGrads {
                        value,
                        grad_z1: g1,
                        grad_z2: zeros,
                        grad_prediction: None,
                    })
                }
                Variant::IsoAlternative => Err(LossError::InvalidSpec(
                    "iso_alternative is only defined for the euclidean metric".into(),
                )),
            }
        }
    }
}

/// Loss written directly in the predictor eigenbasis, `ẑ = Uᵀz`, with the
/// predictor reduced to its eigenvalues.
pub fn eval_loss_eigenbasis(
    spec: &LossSpec,
    zhat1: &[f64],
    zhat2: &[f64],
    eigenvalues: &[f64],
) -> Result<f64, LossError> {
    if !matches!(spec.variant, Variant::Standard | Variant::NoStopGrad) {
        return Err(LossError::InvalidSpec(
            "eigenbasis form is defined for the standard loss only".into(),
        ));
    }
    let m = eigenvalues.len();
    if zhat1.len() != m || zhat2.len() != m {
        return Err(LossError::DimMismatch {
            z1: zhat1.len(),
            z2: zhat2.len(),
            pred: m,
        });
    }
    match spec.metric {
        Metric::Euclidean => Ok(0.5
            * eigenvalues
                .iter()
                .zip(zhat1.iter().zip(zhat2))
                .map(|(l, (a, b))| (l * a - b).powi(2))
                .sum::<f64>()),
        Metric::Cosine => {
            let dz: Vec<f64> = eigenvalues.iter().zip(zhat1).map(|(l, a)| l * a).collect();
            let nd = check_norm("D zhat1", &dz)?;
            let n2 = check_norm("zhat2", zhat2)?;
            Ok(-eigenvalues
                .iter()
                .zip(zhat1.iter().zip(zhat2))
                .map(|(l, (a, b))| l * a * b)
                .sum::<f64>()
                / (nd * n2))
        }
    }
}
