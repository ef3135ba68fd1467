//! Experiment runner: configuration trees with dotted overrides, single runs,
//! suites of runs, initialization sweeps and the CSV/JSON outputs.
//!
//! A run writes `<output_path>.csv` in long format with header
//! `step,series,index,value` (series `corr_eig`, `pred_eig`, `loss`,
//! `alignment`, `chi`) and `<output_path>.json` with the verdict, the fully
//! resolved configuration and PRNG identification.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    classify, compare_theory, eigen_sum_drift, expected_regime, AnalysisError, RegimeVerdict,
    TheoryComparison, Thresholds, TrajectoryRecord,
};
use crate::linalg::LinalgError;
use crate::losses::{LossSpec, Metric, Variant};
use crate::network::{
    apply_gradients, batch_gradients, check_compatible, train_step, ModelConfig, NetworkError, PredictorMode, SiameseState};
use crate::synth_data::{
    make_dataset, sample_batch, step_rng, stream_rng, DataSpec, INIT_STREAM, NORMAL_SAMPLER_ID, PRNG_ID,
};
use crate::theory::{integrate_table1, table1_eigen_rhs, BLOWUP_LIMIT, MAX_STEPS};

pub const SCHEMA_VERSION: u32 = 1;
pub const CSV_HEADER: &str = "step,series,index,value";
pub const SERIES: [&str; 5] = ["corr_eig", "pred_eig", "loss", "alignment", "chi"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error("{}", fmt_config(.message, .line))]
    Config { message: String, line: Option<usize> },
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("numerical error: {0}")]
    Numerical(String),
}

fn fmt_config(message: &str, line: &Option<usize>) -> String {
    match line {
        Some(l) => format!("config error (line {l}): {message}"),
        None => format!("config error: {message}"),
    }
}

impl ExperimentError {
    fn config(message: impl Into<String>) -> Self {
        ExperimentError::Config {
            message: message.into(),
            line: None,
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        ExperimentError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config { .. } | ExperimentError::Io { .. } => 2,
            ExperimentError::Numerical(_) => 3,
        }
    }
}

impl From<NetworkError> for ExperimentError {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::InvalidConfig(m) => ExperimentError::config(m),
            other => ExperimentError::Numerical(other.to_string()),
        }
    }
}

impl From<LinalgError> for ExperimentError {
    fn from(e: LinalgError) -> Self {
        ExperimentError::Numerical(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub data: DataSpec,
    pub model: ModelConfig,
    pub loss: LossSpec,
    pub steps: u64,
    /// Metrics are recorded every `record_every` steps and at the last step.
    pub record_every: u64,
    /// Seeds parameter initialization and augmentations; the dataset uses `data.seed`.
    pub seed: u64,
    pub theory_overlay: bool,
    /// Output prefix; `<prefix>.csv` and `<prefix>.json` are written when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_path: Option<PathBuf>,
    pub thresholds: Thresholds,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            name: None,
            data: DataSpec::default(),
            model: ModelConfig::default(),
            loss: LossSpec::new(Metric::Euclidean, Variant::Standard).symmetrized(true),
            steps: 10_000,
            record_every: 10,
            seed: 0,
            theory_overlay: false,
            output_path: None,
            thresholds: Thresholds::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ExperimentError::config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.steps == 0 {
            return Err(ExperimentError::config("steps must be at least 1"));
        }
        if self.record_every == 0 {
            return Err(ExperimentError::config("record_every must be at least 1"));
        }
        self.data
            .validate()
            .map_err(|e| ExperimentError::config(e.to_string()))?;
        check_compatible(&self.model, &self.loss)?;
        let t = &self.thresholds;
        if !(t.window > 0.0 && t.window <= 1.0) {
            return Err(ExperimentError::config("thresholds.window must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Name used for output files and summary rows.
    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            format!(
                "{}-{}-s{}",
                self.loss.metric.as_str(),
                self.loss.variant.as_str(),
                self.seed
            )
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn parse_table(text: &str) -> Result<toml::Table, ExperimentError> {
    text.parse::<toml::Table>().map_err(|e| ExperimentError::Config {
        message: e.message().trim().to_string(),
        line: e.span().map(|s| line_of(text, s.start)),
    })
}

/// Recursively overlays `src` onto `dst`.
fn merge(dst: &mut toml::Table, src: toml::Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => merge(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back to
/// a bare string.
fn parse_override_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies a dotted `key=value` override.
pub fn apply_override(tree: &mut toml::Table, assignment: &str) -> Result<(), ExperimentError> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| ExperimentError::config(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ExperimentError::config(format!("bad override key `{key}`")));
    }
    let mut node = tree;
    for p in &parts[..parts.len() - 1] {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = match entry {
            toml::Value::Table(t) => t,
            _ => {
                return Err(ExperimentError::config(format!(
                    "override `{key}`: `{p}` is not a table"
                )))
            }
        };
    }
    node.insert(parts[parts.len() - 1].to_string(), parse_override_value(value));
    Ok(())
}

/// Accepts `loss = "cosine/iso"` as shorthand for the full table.
fn expand_loss_shorthand(tree: &mut toml::Table) -> Result<(), ExperimentError> {
    if let Some(toml::Value::String(s)) = tree.get("loss") {
        let spec: LossSpec = s
            .parse()
            .map_err(|e: crate::losses::LossError| ExperimentError::config(e.to_string()))?;
        let v = toml::Value::try_from(spec).expect("loss serializes");
        tree.insert("loss".into(), v);
    }
    Ok(())
}

fn default_tree() -> toml::Table {
    toml::Table::try_from(RunConfig::default()).expect("default config serializes")
}

/// Resolves a configuration from defaults, a partial tree and overrides.
pub fn resolve_config(partial: toml::Table, overrides: &[String]) -> Result<RunConfig, ExperimentError> {
    let mut tree = default_tree();
    let mut partial = partial;
    expand_loss_shorthand(&mut partial)?;
    merge(&mut tree, partial);
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    expand_loss_shorthand(&mut tree)?;
    let cfg: RunConfig = tree
        .try_into()
        .map_err(|e: toml::de::Error| ExperimentError::config(e.message().trim().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Line of the first definition of the first backticked key named in
/// `message`, e.g. ``unknown field `stpes` ``.
fn locate_key(text: &str, message: &str) -> Option<usize> {
    let key = message.split('`').nth(1)?;
    let leaf = key.rsplit('.').next()?;
    text.lines().position(|l| {
        let t = l.trim_start();
        let head = t.trim_start_matches('[').trim_start();
        [t, head].iter().any(|s| {
            s.strip_prefix(leaf)
                .is_some_and(|rest| rest.starts_with([' ', '=', '.', ']', '\t']))
        })
    })
    .map(|i| i + 1)
}

pub fn parse_run_config(text: &str, overrides: &[String]) -> Result<RunConfig, ExperimentError> {
    resolve_config(parse_table(text)?, overrides).map_err(|e| match e {
        ExperimentError::Config { message, line: None } => ExperimentError::Config {
            line: locate_key(text, &message),
            message,
        },
        other => other,
    })
}

pub fn load_run_config(path: &Path, overrides: &[String]) -> Result<RunConfig, ExperimentError> {
    let text = fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
    parse_run_config(&text, overrides)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutcome {
    pub name: String,
    pub config: RunConfig,
    pub record: TrajectoryRecord,
    pub verdict: Option<RegimeVerdict>,
    /// Why no verdict could be given (too few records, unclassified, ...).
    pub classification_error: Option<String>,
    pub eigen_sum_drift: f64,
    pub comparison: Option<TheoryComparison>,
    /// Set when the run aborted on a numerical error; the record holds the
    /// steps completed before it.
    pub error: Option<String>,
}

impl RunOutcome {
    pub fn label(&self) -> Option<&'static str> {
        self.verdict.as_ref().map(|v| v.label.as_str())
    }

    pub fn matches_table1(&self) -> bool {
        self.verdict
            .as_ref()
            .and_then(|v| v.matches_table1)
            .unwrap_or(false)
    }
}

fn predictor_rate(state: &SiameseState) -> f64 {
    match state.predictor.mode {
        PredictorMode::ClosedForm { alpha, .. } => alpha * state.learning_rate,
        _ => state.learning_rate,
    }
}

fn theory_overlay(
    cfg: &RunConfig,
    record: &TrajectoryRecord,
    rate: f64,
) -> Option<Result<TheoryComparison, AnalysisError>> {
    if table1_eigen_rhs(&cfg.loss, &[1.0], 1.0).is_err() || record.len() < 2 || rate <= 0.0 {
        return None;
    }
    let horizon = (record.steps[record.len() - 1] - record.steps[0]) as f64;
    let n = ((horizon / crate::theory::DEFAULT_DT).ceil() as usize).clamp(1, MAX_STEPS);
    let dt = horizon / n as f64;
    let lambda0 = &record.predictor_eigenvalues[0];
    let traj = integrate_table1(&cfg.loss, lambda0, rate, dt, n).ok()?;
    Some(compare_theory(record, &traj))
}

/// True once the top correlation eigenvalue has grown past `ceiling` times its
/// first recorded value.
fn runaway(record: &TrajectoryRecord, ceiling: f64) -> bool {
    match (record.corr_eigenvalues.first(), record.corr_eigenvalues.last()) {
        (Some(a), Some(b)) => b[0] > ceiling * a[0],
        _ => false,
    }
}

/// Trains one configuration, classifies it, optionally compares with theory,
/// and writes outputs if `output_path` is set. A blow-up of the representation
/// ends the run early with the record flagged as diverged; other numerical
/// failures end it with `error` set.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome, ExperimentError> {
    cfg.validate()?;
    let dataset = make_dataset(&cfg.data).map_err(|e| ExperimentError::config(e.to_string()))?;
    let mut init_rng = stream_rng(cfg.seed, INIT_STREAM);
    let mut state = SiameseState::init(&cfg.model, cfg.data.input_dim, &cfg.loss, &mut init_rng)?;
    let rate = predictor_rate(&state);

    let mut record = TrajectoryRecord {
        alignment: Some(Vec::new()),
        chi: Some(Vec::new()),
        ..TrajectoryRecord::default()
    };
    let mut error = None;
    for step in 0..cfg.steps {
        let mut rng = step_rng(cfg.seed, step);
        let pairs = sample_batch(&dataset, cfg.data.aug_sigma, &mut rng);
        let recording = step % cfg.record_every == 0 || step + 1 == cfg.steps;
        if !recording {
            // gradient step without diagnostics
            match batch_gradients(&mut state, &pairs, &cfg.loss) {
                Ok(g) if g.loss.is_finite() && g.corr.trace().abs() <= BLOWUP_LIMIT => {
                    apply_gradients(&mut state, &g);
                    continue;
                }
                Ok(_) => {
                    record.diverged = true;
                    break;
                }
                Err(e) => {
                    if runaway(&record, cfg.thresholds.diverge_ceiling) {
                        record.diverged = true;
                    } else {
                        error = Some(format!("step {step}: {e}"));
                    }
                    break;
                }
            }
        }
        let metrics = match train_step(&mut state, &pairs, &cfg.loss) {
            Ok(m) => m,
            Err(e) => {
                if runaway(&record, cfg.thresholds.diverge_ceiling) {
                    // failure after run-away growth
                    record.diverged = true;
                } else {
                    error = Some(format!("step {step}: {e}"));
                }
                break;
            }
        };
        let blown = metrics
            .corr_eigenvalues
            .iter()
            .chain(std::iter::once(&metrics.loss))
            .any(|x| !x.is_finite() || x.abs() > BLOWUP_LIMIT);
        if blown {
            record.diverged = true;
            break;
        }
        {
            record.steps.push(step);
            record.corr_eigenvalues.push(metrics.corr_eigenvalues);
            record.predictor_eigenvalues.push(metrics.predictor_eigenvalues);
            record.losses.push(metrics.loss);
            record.alignment.as_mut().unwrap().push(metrics.alignment);
            record.chi.as_mut().unwrap().push(metrics.chi);
        }
    }

    let (verdict, classification_error) = match classify(&record, &cfg.thresholds) {
        Ok(v) => (Some(v.against(&cfg.loss)), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let comparison = if cfg.theory_overlay && error.is_none() {
        theory_overlay(cfg, &record, rate).and_then(|r| r.ok())
    } else {
        None
    };
    let outcome = RunOutcome {
        name: cfg.display_name(),
        config: cfg.clone(),
        eigen_sum_drift: eigen_sum_drift(&record),
        record,
        verdict,
        classification_error,
        comparison,
        error,
    };
    if let Some(prefix) = &cfg.output_path {
        write_outputs(&outcome, prefix)?;
    }
    Ok(outcome)
}

/// Long-format CSV of every recorded series.
pub fn trajectory_csv(record: &TrajectoryRecord) -> String {
    let mut out = String::with_capacity(64 * record.len() * 16);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for (k, &step) in record.steps.iter().enumerate() {
        let mut series = |name: &str, values: &[f64]| {
            for (i, v) in values.iter().enumerate() {
                let _ = writeln!(out, "{step},{name},{i},{v:e}");
            }
        };
        series("corr_eig", &record.corr_eigenvalues[k]);
        series("pred_eig", &record.predictor_eigenvalues[k]);
        series("loss", &[record.losses[k]]);
        if let Some(a) = &record.alignment {
            series("alignment", &a[k]);
        }
        if let Some(c) = &record.chi {
            series("chi", &c[k]);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrngInfo {
    pub generator: String,
    pub normal_sampler: String,
    pub streams: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryInfo {
    pub name: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSidecar {
    pub schema_version: u32,
    pub library: LibraryInfo,
    pub prng: PrngInfo,
    pub name: String,
    pub status: String,
    pub error: Option<String>,
    pub verdict: Option<RegimeVerdict>,
    pub expected: String,
    pub classification_error: Option<String>,
    pub diverged: bool,
    pub records: usize,
    pub eigen_sum_drift: f64,
    pub comparison: Option<TheoryComparison>,
    pub config: RunConfig,
}

impl RunSidecar {
    pub fn from_outcome(o: &RunOutcome) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            library: LibraryInfo {
                name: env!("CARGO_PKG_NAME").into(),
                version: env!("CARGO_PKG_VERSION").into(),
            },
            prng: PrngInfo {
                generator: PRNG_ID.into(),
                normal_sampler: NORMAL_SAMPLER_ID.into(),
                streams: "data=0, init=1, step k=2^32+k".into(),
            },
            name: o.name.clone(),
            status: if o.error.is_some() { "error" } else { "ok" }.into(),
            error: o.error.clone(),
            verdict: o.verdict.clone(),
            expected: expected_regime(&o.config.loss).as_str().into(),
            classification_error: o.classification_error.clone(),
            diverged: o.record.diverged,
            records: o.record.len(),
            eigen_sum_drift: o.eigen_sum_drift,
            comparison: o.comparison.clone(),
            config: o.config.clone(),
        }
    }
}

fn with_extension(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn write_outputs(outcome: &RunOutcome, prefix: &Path) -> Result<(), ExperimentError> {
    if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))?;
    }
    let csv = with_extension(prefix, "csv");
    fs::write(&csv, trajectory_csv(&outcome.record)).map_err(|e| ExperimentError::io(&csv, e))?;
    let json = with_extension(prefix, "json");
    let mut body = serde_json::to_string_pretty(&RunSidecar::from_outcome(outcome))
        .map_err(|e| ExperimentError::Numerical(e.to_string()))?;
    body.push('\n');
    fs::write(&json, body).map_err(|e| ExperimentError::io(&json, e))
}

// ---------------------------------------------------------------- suites

/// One entry of a suite: a resolved config, or the reason it failed to resolve.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub line: usize,
    pub config: Result<RunConfig, ExperimentError>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteRow {
    pub name: String,
    pub loss: String,
    pub seed: u64,
    pub verdict: Option<String>,
    pub expected: String,
    pub pass: bool,
    pub eigen_sum_drift: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteSummary {
    pub rows: Vec<SuiteRow>,
}

impl SuiteSummary {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,loss,seed,verdict,expected,pass,eigen_sum_drift,error\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.name,
                r.loss,
                r.seed,
                r.verdict.as_deref().unwrap_or(""),
                r.expected,
                r.pass,
                r.eigen_sum_drift.map(|d| d.to_string()).unwrap_or_default(),
                r.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
            );
        }
        out
    }
}

impl fmt::Display for SuiteSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        writeln!(f, "{:<w$}  {:<28}  {:<18}  {:<18}  pass", "name", "loss", "verdict", "expected")?;
        for r in &self.rows {
            let verdict = match (&r.verdict, &r.error) {
                (Some(v), _) => v.clone(),
                (None, Some(_)) => "error".into(),
                (None, None) => "-".into(),
            };
            writeln!(
                f,
                "{:<w$}  {:<28}  {:<18}  {:<18}  {}",
                r.name,
                r.loss,
                verdict,
                r.expected,
                if r.pass { "PASS" } else { "FAIL" }
            )?;
            if let Some(e) = &r.error {
                writeln!(f, "{:<w$}    {e}", "")?;
            }
        }
        Ok(())
    }
}

/// Suite file layout:
///
/// ```toml
/// schema_version = 1
/// output_dir = "out"        # optional; each run writes <output_dir>/<name>.*
///
/// [defaults]                # optional partial config applied to every run
/// steps = 5000
///
/// [[runs]]
/// loss = "cosine/iso"
/// seeds = [0, 1, 2]         # optional; expands into one run per seed
/// ```
pub fn parse_suite(text: &str) -> Result<Vec<SuiteEntry>, ExperimentError> {
    let mut doc = parse_table(text)?;
    let run_lines: Vec<usize> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| l.trim_start().starts_with("[[runs]]"))
        .map(|(i, _)| i + 1)
        .collect();
    match doc.remove("schema_version") {
        None => {}
        Some(toml::Value::Integer(v)) if v == SCHEMA_VERSION as i64 => {}
        Some(v) => {
            return Err(ExperimentError::config(format!("unsupported suite schema_version {v}")))
        }
    }
    let output_dir = match doc.remove("output_dir") {
        None => None,
        Some(toml::Value::String(s)) => Some(PathBuf::from(s)),
        Some(_) => return Err(ExperimentError::config("output_dir must be a string")),
    };
    let defaults = match doc.remove("defaults") {
        None => toml::Table::new(),
        Some(toml::Value::Table(t)) => t,
        Some(_) => return Err(ExperimentError::config("defaults must be a table")),
    };
    let runs = match doc.remove("runs") {
        None => Vec::new(),
        Some(toml::Value::Array(a)) => a,
        Some(_) => return Err(ExperimentError::config("runs must be an array of tables")),
    };
    if let Some(k) = doc.keys().next() {
        return Err(ExperimentError::config(format!("unknown suite key `{k}`")));
    }

    let mut entries = Vec::new();
    for (idx, run_value) in runs.into_iter().enumerate() {
        let line = run_lines.get(idx).copied().unwrap_or(0);
        let toml::Value::Table(mut table) = run_value else {
            entries.push(SuiteEntry {
                name: format!("run{idx}"),
                line,
                config: Err(ExperimentError::Config {
                    message: "run entry is not a table".into(),
                    line: Some(line),
                }),
            });
            continue;
        };
        let seeds: Option<Vec<u64>> = match table.remove("seeds") {
            None => None,
            Some(toml::Value::Array(a)) => a
                .iter()
                .map(|v| v.as_integer().filter(|i| *i >= 0).map(|i| i as u64))
                .collect(),
            Some(_) => None,
        };
        let mut partial = defaults.clone();
        merge(&mut partial, table);
        let variants: Vec<toml::Table> = match &seeds {
            Some(list) => list
                .iter()
                .map(|&s| {
                    let mut t = partial.clone();
                    let _ = apply_override(&mut t, &format!("seed={s}"));
                    let _ = apply_override(&mut t, &format!("data.seed={s}"));
                    t
                })
                .collect(),
            None => vec![partial],
        };
        for t in variants {
            let cfg = resolve_config(t, &[]).map_err(|e| match e {
                ExperimentError::Config { message, .. } => ExperimentError::Config {
                    message: format!("run {}: {message}", idx + 1),
                    line: Some(line),
                },
                other => other,
            });
            let cfg = cfg.map(|mut c| {
                if let Some(dir) = &output_dir {
                    c.output_path = Some(dir.join(c.display_name()));
                }
                c
            });
            let name = match &cfg {
                Ok(c) => c.display_name(),
                Err(_) => format!("run{}", idx + 1),
            };
            entries.push(SuiteEntry { name, line, config: cfg });
        }
    }
    Ok(entries)
}

fn row_for(entry: &SuiteEntry, result: Option<Result<RunOutcome, ExperimentError>>) -> SuiteRow {
    match (&entry.config, result) {
        (Ok(cfg), Some(Ok(o))) => SuiteRow {
            name: entry.name.clone(),
            loss: cfg.loss.label(),
            seed: cfg.seed,
            verdict: o.label().map(str::to_string),
            expected: expected_regime(&cfg.loss).as_str().into(),
            pass: o.error.is_none() && o.matches_table1(),
            eigen_sum_drift: Some(o.eigen_sum_drift),
            error: o.error.or(o.classification_error),
        },
        (Ok(cfg), Some(Err(e))) => SuiteRow {
            name: entry.name.clone(),
            loss: cfg.loss.label(),
            seed: cfg.seed,
            verdict: None,
            expected: expected_regime(&cfg.loss).as_str().into(),
            pass: false,
            eigen_sum_drift: None,
            error: Some(e.to_string()),
        },
        (Err(e), _) => SuiteRow {
            name: entry.name.clone(),
            loss: "-".into(),
            seed: 0,
            verdict: None,
            expected: "-".into(),
            pass: false,
            eigen_sum_drift: None,
            error: Some(e.to_string()),
        },
        (Ok(_), None) => unreachable!("valid entries always carry a result"),
    }
}

/// Runs every entry, at most `jobs` at a time. Rows keep the suite order, so
/// the summary does not depend on `jobs`.
pub fn run_entries(entries: &[SuiteEntry], jobs: usize) -> (SuiteSummary, Vec<Option<RunOutcome>>) {
    let exec = |e: &SuiteEntry| e.config.as_ref().ok().map(run);
    let results: Vec<Option<Result<RunOutcome, ExperimentError>>> = if jobs <= 1 {
        entries.iter().map(exec).collect()
    } else {
        match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
            Ok(pool) => pool.install(|| entries.par_iter().map(exec).collect()),
            Err(_) => entries.iter().map(exec).collect(),
        }
    };
    let mut rows = Vec::with_capacity(entries.len());
    let mut outcomes = Vec::with_capacity(entries.len());
    for (entry, result) in entries.iter().zip(results) {
        outcomes.push(result.as_ref().and_then(|r| r.as_ref().ok()).cloned());
        rows.push(row_for(entry, result));
    }
    (SuiteSummary { rows }, outcomes)
}

pub fn run_suite(path: &Path, jobs: usize) -> Result<SuiteSummary, ExperimentError> {
    let text = fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
    let entries = parse_suite(&text)?;
    Ok(run_entries(&entries, jobs).0)
}

// ---------------------------------------------------------------- sweeps

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub init_scale: f64,
    pub verdict: Option<String>,
    pub terminal: Vec<f64>,
    pub terminal_mean: f64,
    pub terminal_cv: f64,
    pub error: Option<String>,
}

/// Repeats `base` at each initialization scale (in parallel, one run per worker).
pub fn sweep_initializations(base: &RunConfig, scales: &[f64]) -> Result<Vec<SweepPoint>, ExperimentError> {
    let configs: Vec<RunConfig> = scales
        .iter()
        .map(|&s| {
            let mut c = base.clone();
            c.model.init_scale = s;
            if let Some(p) = &base.output_path {
                let mut name = p.as_os_str().to_owned();
                name.push(format!("-scale{s}"));
                c.output_path = Some(PathBuf::from(name));
            }
            c.validate().map(|_| c)
        })
        .collect::<Result<_, _>>()?;
    let outcomes: Vec<Result<RunOutcome, ExperimentError>> = configs.par_iter().map(run).collect();
    outcomes
        .into_iter()
        .zip(scales)
        .map(|(o, &s)| {
            let o = o?;
            let terminal = o.record.predictor_eigenvalues.last().cloned().unwrap_or_default();
            let n = terminal.len().max(1) as f64;
            let mean = terminal.iter().sum::<f64>() / n;
            let sd = (terminal.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            Ok(SweepPoint {
                init_scale: s,
                verdict: o.label().map(str::to_string),
                terminal,
                terminal_mean: mean,
                terminal_cv: if mean != 0.0 { sd / mean.abs() } else { f64::INFINITY },
                error: o.error.or(o.classification_error),
            })
        })
        .collect()
}
