//! Trajectory diagnostics: regime classification, the eigenvalue-sum
//! conservation check, eigenspace alignment, convergence timing and
//! theory-vs-empirical comparison.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dot, norm, sym_eig, LinalgError, Matrix, SymEigDecomp, SymMatrix};
use crate::losses::{LossSpec, Metric, Variant};
use crate::theory::TheoryTrajectory;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("need at least {needed} recorded steps, got {got}")]
    TooFewSteps { needed: usize, got: usize },
    #[error("trajectory matches no regime: {0}")]
    Unclassified(Box<Evidence>),
    #[error("mode count mismatch: empirical {empirical}, theory {theory}")]
    ModeMismatch { empirical: usize, theory: usize },
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    ConvergeToOne,
    ConvergeToEqual,
    Collapse,
    Diverge,
    Static,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::ConvergeToOne => "converge_to_one",
            Regime::ConvergeToEqual => "converge_to_equal",
            Regime::Collapse => "collapse",
            Regime::Diverge => "diverge",
            Regime::Static => "static",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Predicted regime for each loss configuration.
pub fn expected_regime(loss: &LossSpec) -> Regime {
    match (loss.metric, loss.variant) {
        (Metric::Euclidean, Variant::Standard | Variant::Iso | Variant::IsoAlternative) => {
            Regime::ConvergeToOne
        }
        (Metric::Euclidean, Variant::NoStopGrad) => Regime::Collapse,
        (Metric::Euclidean, Variant::NoPredictor) => Regime::Static,
        (Metric::Cosine, Variant::NoStopGrad) => Regime::Diverge,
        (Metric::Cosine, _) => Regime::ConvergeToEqual,
    }
}

/// Classification thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// Trailing fraction of the record examined.
    pub window: f64,
    pub static_drift: f64,
    /// Collapse when the top eigenvalue falls below this fraction of its initial value.
    pub collapse_floor: f64,
    /// Divergence when the top eigenvalue exceeds this multiple of its initial value.
    pub diverge_ceiling: f64,
    /// Band around 1, and coefficient-of-variation bound, for convergence.
    pub equal_band: f64,
    pub min_mean: f64,
    pub min_steps: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            window: 0.2,
            static_drift: 0.01,
            collapse_floor: 0.05,
            diverge_ceiling: 100.0,
            equal_band: 0.05,
            min_mean: 0.05,
            min_steps: 100,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub steps: Vec<u64>,
    /// Sorted eigenvalues of the batch representation correlation.
    pub corr_eigenvalues: Vec<Vec<f64>>,
    /// Sorted predictor eigenvalues; classification reads this series.
    pub predictor_eigenvalues: Vec<Vec<f64>>,
    pub losses: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chi: Option<Vec<Vec<f64>>>,
    /// Set when the producing process stopped on a blow-up.
    pub diverged: bool,
}

fn sorted_desc(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Wraps an integrated eigenvalue trajectory; integration steps become
    /// record steps and both eigenvalue series hold the sorted states.
    pub fn from_theory(traj: &TheoryTrajectory) -> Self {
        let eig: Vec<Vec<f64>> = traj.states.iter().map(|s| sorted_desc(s)).collect();
        Self {
            steps: (0..traj.len() as u64).collect(),
            corr_eigenvalues: eig.clone(),
            predictor_eigenvalues: eig,
            losses: vec![0.0; traj.len()],
            alignment: None,
            chi: None,
            diverged: traj.diverged,
        }
    }

    /// Every per-step array has the same length and eigenvalues are sorted.
    pub fn validate(&self) -> Result<(), AnalysisError> {
        let n = self.steps.len();
        let lens = [
            self.corr_eigenvalues.len(),
            self.predictor_eigenvalues.len(),
            self.losses.len(),
        ];
        if lens.iter().any(|&l| l != n)
            || self.alignment.as_ref().is_some_and(|a| a.len() != n)
            || self.chi.as_ref().is_some_and(|c| c.len() != n)
        {
            return Err(AnalysisError::Malformed("per-step arrays differ in length".into()));
        }
        for series in [&self.corr_eigenvalues, &self.predictor_eigenvalues] {
            if series
                .iter()
                .any(|v| v.windows(2).any(|w| w[0] < w[1]))
            {
                return Err(AnalysisError::Malformed("eigenvalues not sorted descending".into()));
            }
        }
        if self.steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(AnalysisError::Malformed("steps not strictly increasing".into()));
        }
        Ok(())
    }
}

/// Statistics behind a verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub initial_max: f64,
    pub terminal: Vec<f64>,
    /// Per-mode mean over the trailing window.
    pub window_mean: Vec<f64>,
    /// Largest relative change of any eigenvalue across the window.
    pub window_drift: f64,
    /// Coefficient of variation across modes of the window means.
    pub cv: f64,
    pub initial_cv: f64,
    pub mean: f64,
    /// Fitted per-step exponential rate of the top eigenvalue over the window.
    pub top_log_rate: f64,
    pub window_max: f64,
    /// Window max over initial max of the top correlation eigenvalue, i.e.
    /// growth of the representation scale itself.
    pub corr_growth: f64,
    pub blowup: bool,
}

impl fmt::Display for Evidence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "initial_max={:.4e} window_max={:.4e} mean={:.4e} cv={:.4} drift={:.4e} top_log_rate={:.3e} corr_growth={:.3e}",
            self.initial_max,
            self.window_max,
            self.mean,
            self.cv,
            self.window_drift,
            self.top_log_rate,
            self.corr_growth
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeVerdict {
    pub label: Regime,
    pub evidence: Evidence,
    /// Set by [`RegimeVerdict::against`]; absent when no loss was given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matches_table1: Option<bool>,
}

impl RegimeVerdict {
    /// Records whether the label agrees with the predicted regime of `loss`.
    /// A converge-to-one label satisfies a converge-to-equal expectation
    /// (equal values that happen to be 1). For cosine without a predictor,
    /// a static trajectory whose modes are becoming more equal also counts.
    pub fn against(mut self, loss: &LossSpec) -> Self {
        let expected = expected_regime(loss);
        let ok = match (expected, self.label) {
            (a, b) if a == b => true,
            (Regime::ConvergeToEqual, Regime::ConvergeToOne) => true,
            (Regime::ConvergeToEqual, Regime::Static) => {
                loss.variant == Variant::NoPredictor && self.evidence.cv < self.evidence.initial_cv
            }
            _ => false,
        };
        self.matches_table1 = Some(ok);
        self
    }
}

fn coefficient_of_variation(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let cv = if mean.abs() > 0.0 { var.sqrt() / mean.abs() } else { f64::INFINITY };
    (cv, mean)
}

fn window_start(len: usize, window: f64) -> usize {
    let start = ((len as f64) * (1.0 - window)).floor() as usize;
    start.min(len.saturating_sub(2))
}

/// Regime of the predictor eigenvalue series, decided over the trailing
/// window with precedence diverge > collapse > converge_to_one >
/// converge_to_equal > static. Collapse requires the top eigenvalue to be
/// non-increasing across the window, so fully underflowed runs count.
pub fn classify(record: &TrajectoryRecord, thr: &Thresholds) -> Result<RegimeVerdict, AnalysisError> {
    let series = &record.predictor_eigenvalues;
    let n = series.len();
    if n < thr.min_steps.max(2) {
        return Err(AnalysisError::TooFewSteps {
            needed: thr.min_steps.max(2),
            got: n,
        });
    }
    let m = series[0].len();
    if m == 0 || series.iter().any(|v| v.len() != m) {
        return Err(AnalysisError::Malformed("inconsistent mode count".into()));
    }
    let series: Vec<Vec<f64>> = series.iter().map(|v| sorted_desc(v)).collect();
    let top = |v: &Vec<f64>| v[0];
    let start = window_start(n, thr.window);
    let win = &series[start..];
    let first = &win[0];
    let last = &series[n - 1];

    let initial_max = top(&series[0]);
    let window_max = win
        .iter()
        .map(top)
        .fold(f64::NEG_INFINITY, |a, b| if b.is_nan() || a.is_nan() { f64::NAN } else { a.max(b) });
    let window_mean: Vec<f64> = (0..m)
        .map(|i| win.iter().map(|v| v[i]).sum::<f64>() / win.len() as f64)
        .collect();
    let window_drift = (0..m)
        .map(|i| {
            let d = (last[i] - first[i]).abs();
            let base = first[i].abs();
            if base > 0.0 {
                d / base
            } else if d == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max);
    let (cv, mean) = coefficient_of_variation(&window_mean);
    let (initial_cv, _) = coefficient_of_variation(&series[0]);
    let span = (record.steps.get(n - 1).copied().unwrap_or(n as u64 - 1) as f64)
        - (record.steps.get(start).copied().unwrap_or(start as u64) as f64);
    let top_log_rate = if top(first) > 0.0 && top(last) > 0.0 && span > 0.0 {
        (top(last).ln() - top(first).ln()) / span
    } else {
        f64::NAN
    };
    let corr_growth = corr_growth(record, start);
    let evidence = Evidence {
        initial_max,
        terminal: last.clone(),
        window_mean: window_mean.clone(),
        window_drift,
        cv,
        initial_cv,
        mean,
        top_log_rate,
        window_max,
        corr_growth,
        blowup: record.diverged,
    };

    let non_finite = win.iter().flatten().any(|x| !x.is_finite());
    let label = if record.diverged
        || non_finite
        || window_max > thr.diverge_ceiling * initial_max
        || corr_growth > thr.diverge_ceiling
    {
        Some(Regime::Diverge)
    } else if top(last) < thr.collapse_floor * initial_max && top(last) <= top(first) {
        Some(Regime::Collapse)
    } else if window_mean.iter().all(|l| (l - 1.0).abs() < thr.equal_band) {
        Some(Regime::ConvergeToOne)
    } else if cv < thr.equal_band && mean > thr.min_mean {
        Some(Regime::ConvergeToEqual)
    } else if window_drift < thr.static_drift {
        Some(Regime::Static)
    } else {
        None
    };
    match label {
        Some(label) => Ok(RegimeVerdict {
            label,
            evidence,
            matches_table1: None,
        }),
        None => Err(AnalysisError::Unclassified(Box::new(evidence))),
    }
}

// A fractional predictor power compresses growth (lambda^0.5 grows 10x where
// the representation grows 100x), so blow-up is also judged on C_z directly.
fn corr_growth(record: &TrajectoryRecord, start: usize) -> f64 {
    let c = &record.corr_eigenvalues;
    if c.len() != record.predictor_eigenvalues.len() || c.is_empty() {
        return 0.0;
    }
    let top = |v: &Vec<f64>| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let init = top(&c[0]);
    let peak = c[start..].iter().map(top).fold(f64::NEG_INFINITY, f64::max);
    if !(init > 0.0) {
        return 0.0;
    }
    peak / init
}

/// `max_t |Σλ(t) − Σλ(0)| / Σλ(0)` over the correlation eigenvalues.
pub fn eigen_sum_drift(record: &TrajectoryRecord) -> f64 {
    let Some(first) = record.corr_eigenvalues.first() else {
        return 0.0;
    };
    let s0: f64 = first.iter().sum();
    record
        .corr_eigenvalues
        .iter()
        .map(|v| (v.iter().sum::<f64>() - s0).abs() / s0)
        .fold(0.0, f64::max)
}

/// `|u_iᵀ W_P u_i| / ‖W_P u_i‖` for each eigenvector `u_i` of `corr`, sorted
/// by descending eigenvalue. Scores of vanishing `W_P u_i` are 0.
pub fn alignment_scores(corr: &SymMatrix, predictor: &Matrix) -> Result<Vec<f64>, LinalgError> {
    let m = corr.dim();
    if predictor.rows() != m || predictor.cols() != m {
        return Err(LinalgError::DimMismatch {
            expected: m,
            found: predictor.rows(),
        });
    }
    alignment_scores_from(&sym_eig(corr)?, predictor)
}

/// [`alignment_scores`] with the decomposition of the correlation matrix given.
pub fn alignment_scores_from(decomp: &SymEigDecomp, predictor: &Matrix) -> Result<Vec<f64>, LinalgError> {
    let m = decomp.dim();
    if predictor.rows() != m || predictor.cols() != m {
        return Err(LinalgError::DimMismatch {
            expected: m,
            found: predictor.rows(),
        });
    }
    Ok((0..m)
        .map(|i| {
            let u = decomp.basis.column(i);
            let wu = predictor.matvec(&u);
            let n = norm(&wu);
            if n < 1e-12 {
                0.0
            } else {
                (dot(&u, &wu).abs() / n).min(1.0)
            }
        })
        .collect())
}

/// Step at which each sorted predictor eigenvalue enters, and thereafter
/// stays within, `band` (relative) of its terminal value.
pub fn convergence_times(record: &TrajectoryRecord, band: f64) -> Vec<u64> {
    let Some(last) = record.predictor_eigenvalues.last() else {
        return Vec::new();
    };
    (0..last.len())
        .map(|i| {
            let target = last[i];
            let tol = band * target.abs();
            let mut entry = record.steps.len() - 1;
            for (k, v) in record.predictor_eigenvalues.iter().enumerate().rev() {
                if (v[i] - target).abs() <= tol {
                    entry = k;
                } else {
                    break;
                }
            }
            record.steps[entry]
        })
        .collect()
}

/// Difference between the slowest and fastest mode's convergence step.
pub fn convergence_spread(record: &TrajectoryRecord, band: f64) -> u64 {
    let t = convergence_times(record, band);
    match (t.iter().max(), t.iter().min()) {
        (Some(a), Some(b)) => a - b,
        _ => 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryComparison {
    /// Theory time per recorded step in the fitted map `t = scale · (step − step₀)`.
    pub time_scale: f64,
    pub sup_deviation: Vec<f64>,
    pub terminal_deviation: Vec<f64>,
    pub max_terminal_deviation: f64,
    /// True when some terminal deviation exceeds the tolerance.
    pub flagged: bool,
}

pub const COMPARE_TOLERANCE: f64 = 0.05;

fn theory_at(theory: &TheoryTrajectory, sorted: &[Vec<f64>], t: f64) -> Vec<f64> {
    let times = &theory.times;
    let n = times.len();
    if t <= times[0] {
        return sorted[0].clone();
    }
    if t >= times[n - 1] {
        return sorted[n - 1].clone();
    }
    let hi = times.partition_point(|&x| x <= t).min(n - 1);
    let lo = hi - 1;
    let w = (t - times[lo]) / (times[hi] - times[lo]);
    sorted[lo]
        .iter()
        .zip(&sorted[hi])
        .map(|(a, b)| a + w * (b - a))
        .collect()
}

fn mismatch(record: &TrajectoryRecord, theory: &TheoryTrajectory, sorted: &[Vec<f64>], scale: f64) -> f64 {
    let s0 = record.steps[0] as f64;
    record
        .steps
        .iter()
        .zip(&record.predictor_eigenvalues)
        .map(|(&s, e)| {
            let th = theory_at(theory, sorted, scale * (s as f64 - s0));
            e.iter().zip(&th).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        })
        .sum()
}

/// Compares sorted predictor eigenvalues of a run with an integrated
/// eigenvalue trajectory after fitting the time scale that best aligns them.
/// The theory is held at its final state beyond its last time point.
pub fn compare_theory(
    record: &TrajectoryRecord,
    theory: &TheoryTrajectory,
) -> Result<TheoryComparison, AnalysisError> {
    if record.is_empty() || theory.is_empty() {
        return Err(AnalysisError::TooFewSteps { needed: 1, got: 0 });
    }
    let m = record.predictor_eigenvalues[0].len();
    let mt = theory.states[0].len();
    if m != mt {
        return Err(AnalysisError::ModeMismatch { empirical: m, theory: mt });
    }
    if record.predictor_eigenvalues.len() != record.steps.len() {
        return Err(AnalysisError::Malformed("per-step arrays differ in length".into()));
    }
    let sorted: Vec<Vec<f64>> = theory.states.iter().map(|s| sorted_desc(s)).collect();
    let s0 = record.steps[0] as f64;
    let s_end = *record.steps.last().unwrap() as f64;
    let t_end = *theory.times.last().unwrap();

    let guess = if s_end > s0 && t_end > 0.0 { t_end / (s_end - s0) } else { 1.0 };
    let mut best = (guess, mismatch(record, theory, &sorted, guess));
    if s_end > s0 {
        // coarse scan over six decades in log-space, then golden-section refinement
        let lg = guess.ln();
        let span = 3.0 * std::f64::consts::LN_10;
        let grid = 121;
        let mut best_idx = None;
        for k in 0..grid {
            let la = lg - span + 2.0 * span * k as f64 / (grid - 1) as f64;
            let f = mismatch(record, theory, &sorted, la.exp());
            if f < best.1 {
                best = (la.exp(), f);
                best_idx = Some(la);
            }
        }
        if let Some(center) = best_idx {
            let h = 2.0 * span / (grid - 1) as f64;
            let (mut a, mut b) = (center - h, center + h);
            let phi = (5f64.sqrt() - 1.0) / 2.0;
            for _ in 0..60 {
                let c = b - phi * (b - a);
                let d = a + phi * (b - a);
                let fc = mismatch(record, theory, &sorted, c.exp());
                let fd = mismatch(record, theory, &sorted, d.exp());
                if fc < fd {
                    b = d;
                } else {
                    a = c;
                }
            }
            let mid = 0.5 * (a + b);
            let f = mismatch(record, theory, &sorted, mid.exp());
            if f < best.1 {
                best = (mid.exp(), f);
            }
        }
    }
    let scale = best.0;

    let mut sup = vec![0.0f64; m];
    let mut terminal = vec![0.0; m];
    for (k, (&s, e)) in record.steps.iter().zip(&record.predictor_eigenvalues).enumerate() {
        let th = theory_at(theory, &sorted, scale * (s as f64 - s0));
        for i in 0..m {
            let d = (e[i] - th[i]).abs();
            sup[i] = sup[i].max(d);
            if k + 1 == record.steps.len() {
                terminal[i] = d;
            }
        }
    }
    let max_terminal = terminal.iter().cloned().fold(0.0, f64::max);
    Ok(TheoryComparison {
        time_scale: scale,
        sup_deviation: sup,
        terminal_deviation: terminal,
        max_terminal_deviation: max_terminal,
        flagged: max_terminal > COMPARE_TOLERANCE,
    })
}
