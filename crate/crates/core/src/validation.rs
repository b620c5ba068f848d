//! Factor de-duplication and end-to-end experiment scoring.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backtest::{run_backtest, BacktestReport, StrategyConfig};
use crate::bandit::Action;
use crate::dsl::{evaluate, DslError, Expr, FormulaSpec};
use crate::metrics::{factor_metrics, pearson, FactorMetrics, MetricsBundle};
use crate::panel::{FactorValues, LabelPanel, PanelTensor, PipelineConfig};
use crate::predictor::{
    fit_walk_forward, predict, prepare_features, FeatureSet, LinearModel, ModelSpec, PredictorError, SplitSpec,
};

pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.99;

#[derive(Debug, Error)]
pub enum ValidationError {
    #[error("index mismatch: {0}")]
    IndexMismatch(String),
    #[error("no complete samples for fitting")]
    EmptySampleSet,
    #[error("experiment failed at {stage}: {message}")]
    ExperimentFailed { stage: String, message: String },
    #[error("duplicate library name {0}")]
    DuplicateName(String),
    #[error("factor {name}: {source}")]
    Formula { name: String, source: DslError },
}

pub type Result<T, E = ValidationError> = std::result::Result<T, E>;

fn failed(stage: &str, e: impl std::fmt::Display) -> ValidationError {
    ValidationError::ExperimentFailed {
        stage: stage.into(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LibraryEntry {
    pub name: String,
    pub expr: Expr,
    pub values: FactorValues,
    /// Loop index of the experiment that introduced the factor; `None` for the baseline.
    pub provenance: Option<usize>,
}

/// Named factors with cached values on one panel grid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FactorLibrary {
    pub entries: Vec<LibraryEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub name: String,
    pub provenance: Option<usize>,
}

impl FactorLibrary {
    /// Evaluates each formula on `panel`.
    pub fn from_exprs(panel: &PanelTensor, exprs: &[(String, Expr)], provenance: Option<usize>) -> Result<Self> {
        let mut lib = FactorLibrary::default();
        for (name, expr) in exprs {
            let values = evaluate(expr, panel).map_err(|source| ValidationError::Formula {
                name: name.clone(),
                source,
            })?;
            lib.push(LibraryEntry {
                name: name.clone(),
                expr: expr.clone(),
                values,
                provenance,
            })?;
        }
        Ok(lib)
    }

    pub fn push(&mut self, entry: LibraryEntry) -> Result<()> {
        if self.contains(&entry.name) {
            return Err(ValidationError::DuplicateName(entry.name));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    pub fn values(&self) -> Vec<&FactorValues> {
        self.entries.iter().map(|e| &e.values).collect()
    }

    pub fn named_values(&self) -> Vec<(String, FactorValues)> {
        self.entries.iter().map(|e| (e.name.clone(), e.values.clone())).collect()
    }

    pub fn specs(&self) -> Vec<FormulaSpec> {
        self.entries
            .iter()
            .map(|e| FormulaSpec {
                name: e.name.clone(),
                formula: e.expr.to_string(),
            })
            .collect()
    }

    pub fn provenance(&self) -> Vec<ProvenanceRecord> {
        self.entries
            .iter()
            .map(|e| ProvenanceRecord {
                name: e.name.clone(),
                provenance: e.provenance,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DedupConfig {
    pub threshold: f64,
    /// Compare `|corr|` instead of the signed value.
    pub abs_dedup: bool,
    /// Also compare each candidate with the candidates kept before it.
    pub against_candidates: bool,
}

impl Default for DedupConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_DEDUP_THRESHOLD,
            abs_dedup: false,
            against_candidates: true,
        }
    }
}

fn check_grid(a: &FactorValues, b: &FactorValues) -> Result<()> {
    if a.same_grid(b) {
        Ok(())
    } else {
        Err(ValidationError::IndexMismatch("factor series on different grids".into()))
    }
}

fn date_corr(a: &FactorValues, b: &FactorValues, t: usize) -> Option<f64> {
    let (xa, xb) = (a.cross_section(t), b.cross_section(t));
    let (pa, pb): (Vec<f64>, Vec<f64>) = xa
        .iter()
        .zip(&xb)
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|(x, y)| (*x, *y))
        .unzip();
    if pa.len() < 2 {
        return None;
    }
    let r = pearson(&pa, &pb);
    r.is_finite().then_some(r)
}

/// Time average of the per-date cross-sectional correlation, over dates with
/// at least two valid pairs and a defined correlation. `None` if no date qualifies.
pub fn mean_cross_corr(a: &FactorValues, b: &FactorValues) -> Option<f64> {
    let (sum, n) = (0..a.n_dates())
        .filter_map(|t| date_corr(a, b, t))
        .fold((0.0, 0usize), |(s, n), r| (s + r, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Whether a series has any date with at least two valid values and nonzero dispersion.
pub fn evaluable(a: &FactorValues) -> bool {
    (0..a.n_dates()).any(|t| date_corr(a, a, t).is_some())
}

/// Largest time-averaged correlation between `candidate` and `against`.
pub fn ic_max(candidate: &FactorValues, against: &[&FactorValues], abs: bool) -> Option<f64> {
    against
        .par_iter()
        .filter_map(|m| mean_cross_corr(candidate, m))
        .map(|r| if abs { r.abs() } else { r })
        .reduce_with(f64::max)
}

/// Indices of the candidates that survive de-duplication, in input order.
pub fn dedup(sota: &[&FactorValues], candidates: &[FactorValues], cfg: &DedupConfig) -> Result<Vec<usize>> {
    let reference = sota.first().copied().or(candidates.first());
    if let Some(r) = reference {
        for s in sota {
            check_grid(r, s)?;
        }
        for c in candidates {
            check_grid(r, c)?;
        }
    }
    let mut kept: Vec<usize> = Vec::new();
    for (n, cand) in candidates.iter().enumerate() {
        if !evaluable(cand) {
            continue;
        }
        let mut against: Vec<&FactorValues> = sota.to_vec();
        if cfg.against_candidates {
            against.extend(kept.iter().map(|&k| &candidates[k]));
        }
        let redundant = ic_max(cand, &against, cfg.abs_dedup).is_some_and(|m| m >= cfg.threshold);
        if !redundant {
            kept.push(n);
        }
    }
    Ok(kept)
}

/// Shared, read-only inputs of experiment evaluation.
#[derive(Debug, Clone)]
pub struct EvalContext<'a> {
    pub panel: &'a PanelTensor,
    pub labels: &'a LabelPanel,
    pub split: SplitSpec,
    pub strategy: StrategyConfig,
    pub pipeline: PipelineConfig,
    pub risk_free: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub action: Action,
    pub metrics: MetricsBundle,
    pub kept_factors: Vec<String>,
    pub feature_names: Vec<String>,
    pub model: LinearModel,
    /// `(lambda, validation MSE)` for each grid value.
    pub valid_mse: Vec<(f64, f64)>,
    #[serde(skip)]
    pub report: Option<BacktestReport>,
    /// Daily IC series behind `metrics`.
    #[serde(skip)]
    pub daily: Option<FactorMetrics>,
}

/// Fits the predictor on `features`, scores the test range and backtests it.
///
/// Only train and validation labels reach the fit; test labels are read
/// when computing the predictive metrics.
pub fn evaluate_experiment(
    features: &[(String, FactorValues)],
    kept: &[String],
    spec: &ModelSpec,
    action: Action,
    ctx: &EvalContext<'_>,
) -> Result<ExperimentResult> {
    if features.is_empty() {
        return Err(failed("features", "no features"));
    }
    let prepared = prepare_features(features, spec, ctx.pipeline.epsilon).map_err(|e| failed("features", e))?;
    let fitted = fit_walk_forward(
        &prepared,
        &ctx.labels.normalized,
        &ctx.split,
        &spec.ridge_grid,
        ctx.labels.horizon_tau,
    )
    .map_err(|e| match e {
        PredictorError::EmptySampleSet => ValidationError::EmptySampleSet,
        other => failed("fit", other),
    })?;
    let mut result = score_fitted(&prepared, fitted.model, action, ctx)?;
    result.kept_factors = kept.to_vec();
    result.valid_mse = fitted.valid_mse;
    Ok(result)
}

/// Scores and backtests an already fitted model on the test range.
pub fn evaluate_model(
    features: &[(String, FactorValues)],
    spec: &ModelSpec,
    model: LinearModel,
    ctx: &EvalContext<'_>,
) -> Result<ExperimentResult> {
    let prepared = prepare_features(features, spec, ctx.pipeline.epsilon).map_err(|e| failed("features", e))?;
    if prepared.names != model.feature_names {
        return Err(ValidationError::IndexMismatch(format!(
            "model expects features {:?}, library provides {:?}",
            model.feature_names, prepared.names
        )));
    }
    score_fitted(&prepared, model, Action::Model, ctx)
}

fn score_fitted(prepared: &FeatureSet, model: LinearModel, action: Action, ctx: &EvalContext<'_>) -> Result<ExperimentResult> {
    let scores = predict(&model, &prepared.series).map_err(|e| failed("predict", e))?;
    let test = ctx.split.test;
    let fm = factor_metrics(&scores, &ctx.labels.raw, test.first, test.last).map_err(|e| failed("metrics", e))?;
    let report = run_backtest(&scores, ctx.panel, &ctx.strategy, test).map_err(|e| failed("backtest", e))?;
    let sm = report.strategy_metrics(ctx.risk_free).map_err(|e| failed("metrics", e))?;
    Ok(ExperimentResult {
        action,
        metrics: MetricsBundle::from_parts(&fm, &sm),
        kept_factors: Vec::new(),
        feature_names: prepared.names.clone(),
        model,
        valid_mse: Vec::new(),
        report: Some(report),
        daily: Some(fm),
    })
}
