//! Ridge-regularized linear predictor and the walk-forward protocol.
//!
//! Features are per-(instrument, date) factor series. Samples are assembled
//! date-major, rows with any NaN dropped. Fitting solves the normal equations
//! of `mean((y - Xw - b)^2) + lambda * |w|^2` on centered data, so the
//! intercept is never penalized.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{impute_series, robust_zscore_series, FactorValues, LabelPanel, PanelError, PanelTensor};

/// The ridge grid searched on the validation range.
pub const DEFAULT_RIDGE_GRID: [f64; 4] = [1e-6, 1e-4, 1e-2, 1.0];

pub const DEFAULT_RIDGE_LAMBDA: f64 = 1e-6;

/// Relative pivot size below which the normal matrix counts as singular.
const PIVOT_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("no complete samples in the requested range")]
    EmptySampleSet,
    #[error("normal equations are singular; use a positive ridge penalty")]
    SingularSystem,
    #[error("model expects {expected} features, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Panel(#[from] PanelError),
}

pub type Result<T, E = PredictorError> = std::result::Result<T, E>;

/// Inclusive range of date indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub first: usize,
    pub last: usize,
}

impl DateRange {
    pub fn new(first: usize, last: usize) -> Self {
        Self { first, last }
    }

    pub fn len(&self) -> usize {
        self.last + 1 - self.first
    }

    pub fn is_empty(&self) -> bool {
        self.last < self.first
    }

    pub fn contains(&self, t: usize) -> bool {
        (self.first..=self.last).contains(&t)
    }

    /// Drops the trailing `days` dates whose labels would reach past the range.
    pub fn embargoed(&self, days: usize) -> Option<DateRange> {
        let last = self.last.checked_sub(days)?;
        (last >= self.first).then_some(DateRange::new(self.first, last))
    }
}

/// Train / validation / test ranges in strict temporal order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: DateRange,
    pub valid: DateRange,
    pub test: DateRange,
}

impl SplitSpec {
    pub fn new(train: DateRange, valid: DateRange, test: DateRange) -> Result<Self> {
        let s = Self { train, valid, test };
        s.check_order()?;
        Ok(s)
    }

    fn check_order(&self) -> Result<()> {
        let ok = self.train.first <= self.train.last
            && self.train.last < self.valid.first
            && self.valid.first <= self.valid.last
            && self.valid.last < self.test.first
            && self.test.first <= self.test.last;
        if ok {
            Ok(())
        } else {
            Err(PredictorError::InvalidSplit(format!("{self:?} is not strictly ordered")))
        }
    }

    /// Checks ordering and that every range fits in `n_dates`.
    pub fn validate(&self, n_dates: usize) -> Result<()> {
        self.check_order()?;
        if self.test.last >= n_dates {
            return Err(PredictorError::InvalidSplit(format!(
                "test range ends at {} but the panel has {n_dates} dates",
                self.test.last
            )));
        }
        Ok(())
    }

    /// Splits dates `skip..n_dates` into consecutive blocks by fraction; the
    /// test block takes the remainder.
    pub fn proportional(n_dates: usize, skip: usize, train_frac: f64, valid_frac: f64) -> Result<Self> {
        if !(train_frac > 0.0 && valid_frac > 0.0 && train_frac + valid_frac < 1.0) {
            return Err(PredictorError::InvalidSplit("fractions must be positive and sum below 1".into()));
        }
        let usable = n_dates.saturating_sub(skip);
        let n_train = (usable as f64 * train_frac).floor() as usize;
        let n_valid = (usable as f64 * valid_frac).floor() as usize;
        if n_train == 0 || n_valid == 0 || n_train + n_valid >= usable {
            return Err(PredictorError::InvalidSplit(format!(
                "{usable} usable dates are too few to split"
            )));
        }
        let train = DateRange::new(skip, skip + n_train - 1);
        let valid = DateRange::new(train.last + 1, train.last + n_valid);
        let test = DateRange::new(valid.last + 1, n_dates - 1);
        Self::new(train, valid, test)
    }
}

/// Complete supervised samples, rows ordered date-major then instrument.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub feature_names: Vec<String>,
    /// Row-major, `rows * feature_names.len()`.
    pub features: Vec<f64>,
    pub targets: Vec<f64>,
    /// `(instrument index, date index)` per row.
    pub keys: Vec<(usize, usize)>,
}

impl SampleSet {
    pub fn n_rows(&self) -> usize {
        self.targets.len()
    }

    pub fn n_cols(&self) -> usize {
        self.feature_names.len()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let c = self.n_cols();
        &self.features[k * c..(k + 1) * c]
    }
}

/// Builds samples from panel fields and normalized labels over `range`.
pub fn assemble_samples(
    panel: &PanelTensor,
    factors: &[String],
    labels: &LabelPanel,
    range: DateRange,
) -> Result<SampleSet> {
    let series = factors
        .iter()
        .map(|f| panel.field(f))
        .collect::<Result<Vec<_>, _>>()?;
    assemble_from_series(factors, &series, &labels.normalized, range)
}

/// Like [`assemble_samples`] with the feature series supplied directly.
pub fn assemble_from_series(
    names: &[String],
    series: &[FactorValues],
    targets: &FactorValues,
    range: DateRange,
) -> Result<SampleSet> {
    if names.len() != series.len() {
        return Err(PredictorError::ShapeMismatch {
            expected: names.len(),
            got: series.len(),
        });
    }
    for s in series {
        if !s.same_grid(targets) {
            return Err(PanelError::IndexMismatch("feature and label grids differ".into()).into());
        }
    }
    let n = targets.n_instruments();
    let last = range.last.min(targets.n_dates().saturating_sub(1));
    let mut out = SampleSet {
        feature_names: names.to_vec(),
        features: Vec::new(),
        targets: Vec::new(),
        keys: Vec::new(),
    };
    let mut row = Vec::with_capacity(series.len());
    for t in range.first..=last {
        for i in 0..n {
            let y = targets.get(i, t);
            if !y.is_finite() {
                continue;
            }
            row.clear();
            row.extend(series.iter().map(|s| s.get(i, t)));
            if row.iter().any(|x| !x.is_finite()) {
                continue;
            }
            out.features.extend_from_slice(&row);
            out.targets.push(y);
            out.keys.push((i, t));
        }
    }
    if out.targets.is_empty() {
        return Err(PredictorError::EmptySampleSet);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub feature_names: Vec<String>,
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub ridge_lambda: f64,
}

impl LinearModel {
    pub fn zero(feature_names: Vec<String>) -> Self {
        let weights = vec![0.0; feature_names.len()];
        Self {
            feature_names,
            weights,
            intercept: 0.0,
            ridge_lambda: 0.0,
        }
    }

    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("finite model serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

/// In-place Cholesky solve of the dense SPD system `a x = b` (`a` row-major).
fn cholesky_solve(a: &mut [f64], b: &mut [f64], n: usize) -> Result<()> {
    let scale = (0..n).map(|k| a[k * n + k].abs()).fold(0.0, f64::max);
    let tol = PIVOT_TOL * scale.max(f64::MIN_POSITIVE);
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d.is_nan() || d <= tol {
            return Err(PredictorError::SingularSystem);
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * n + k] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= a[k * n + i] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    Ok(())
}

/// Closed-form ridge fit.
pub fn fit(train: &SampleSet, ridge_lambda: f64) -> Result<LinearModel> {
    if !(ridge_lambda >= 0.0 && ridge_lambda.is_finite()) {
        return Err(PredictorError::InvalidSpec(format!("ridge_lambda {ridge_lambda}")));
    }
    let rows = train.n_rows();
    if rows == 0 {
        return Err(PredictorError::EmptySampleSet);
    }
    let c = train.n_cols();
    let nf = rows as f64;
    let mut x_mean = vec![0.0; c];
    for k in 0..rows {
        for (m, v) in x_mean.iter_mut().zip(train.row(k)) {
            *m += v;
        }
    }
    x_mean.iter_mut().for_each(|m| *m /= nf);
    let y_mean = train.targets.iter().sum::<f64>() / nf;

    let mut gram = vec![0.0; c * c];
    let mut rhs = vec![0.0; c];
    let mut xc = vec![0.0; c];
    for k in 0..rows {
        for (j, v) in train.row(k).iter().enumerate() {
            xc[j] = v - x_mean[j];
        }
        let yc = train.targets[k] - y_mean;
        for a in 0..c {
            rhs[a] += xc[a] * yc;
            for b in 0..=a {
                gram[a * c + b] += xc[a] * xc[b];
            }
        }
    }
    for a in 0..c {
        rhs[a] /= nf;
        for b in 0..=a {
            let v = gram[a * c + b] / nf;
            gram[a * c + b] = v;
            gram[b * c + a] = v;
        }
        gram[a * c + a] += ridge_lambda;
    }
    if c > 0 {
        cholesky_solve(&mut gram, &mut rhs, c)?;
    }
    let intercept = y_mean - x_mean.iter().zip(&rhs).map(|(m, w)| m * w).sum::<f64>();
    if !intercept.is_finite() || rhs.iter().any(|w| !w.is_finite()) {
        return Err(PredictorError::SingularSystem);
    }
    Ok(LinearModel {
        feature_names: train.feature_names.clone(),
        weights: rhs,
        intercept,
        ridge_lambda,
    })
}

/// Mean squared error of `model` on a sample set.
pub fn mse(model: &LinearModel, samples: &SampleSet) -> f64 {
    let n = samples.n_rows();
    (0..n)
        .map(|k| (samples.targets[k] - model.predict_row(samples.row(k))).powi(2))
        .sum::<f64>()
        / n as f64
}

/// Scores every cell of the grid; any NaN feature gives a NaN score.
pub fn predict(model: &LinearModel, series: &[FactorValues]) -> Result<FactorValues> {
    if series.len() != model.weights.len() {
        return Err(PredictorError::ShapeMismatch {
            expected: model.weights.len(),
            got: series.len(),
        });
    }
    let Some(first) = series.first() else {
        return Err(PredictorError::InvalidSpec("no feature series to score".into()));
    };
    let mut out = FactorValues::filled(first.instruments.clone(), first.dates.clone(), f64::NAN);
    let mut row = vec![0.0; series.len()];
    for (k, cell) in out.values.iter_mut().enumerate() {
        for (j, s) in series.iter().enumerate() {
            row[j] = s.values[k];
        }
        if row.iter().all(|x| x.is_finite()) {
            *cell = model.predict_row(&row);
        }
    }
    Ok(out)
}

/// Scores panel fields named by `factors`.
pub fn predict_panel(model: &LinearModel, panel: &PanelTensor, factors: &[String]) -> Result<FactorValues> {
    if factors.len() != model.weights.len() {
        return Err(PredictorError::ShapeMismatch {
            expected: model.weights.len(),
            got: factors.len(),
        });
    }
    let series = factors
        .iter()
        .map(|f| panel.field(f))
        .collect::<Result<Vec<_>, _>>()?;
    predict(model, &series)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureTransform {
    None,
    Zscore,
}

/// The mutable part of the predictor explored by model-side experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub transform: FeatureTransform,
    pub ridge_grid: Vec<f64>,
    /// Number of lagged copies (lags 1..=lookback) appended per factor.
    pub lookback: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            transform: FeatureTransform::Zscore,
            ridge_grid: DEFAULT_RIDGE_GRID.to_vec(),
            lookback: 0,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ridge_grid.is_empty() {
            return Err(PredictorError::InvalidSpec("empty ridge grid".into()));
        }
        if self.ridge_grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(PredictorError::InvalidSpec("ridge grid values must be finite and >= 0".into()));
        }
        if self.lookback > 20 {
            return Err(PredictorError::InvalidSpec("lookback above 20".into()));
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        let t = match self.transform {
            FeatureTransform::None => "none",
            FeatureTransform::Zscore => "zscore",
        };
        let grid: Vec<String> = self.ridge_grid.iter().map(|l| format!("{l:e}")).collect();
        format!("transform={t} ridge_grid=[{}] lookback={}", grid.join(","), self.lookback)
    }
}

/// Named feature series ready for sample assembly.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub names: Vec<String>,
    pub series: Vec<FactorValues>,
}

fn lagged(s: &FactorValues, lag: usize) -> FactorValues {
    let mut out = FactorValues::filled(s.instruments.clone(), s.dates.clone(), f64::NAN);
    let t_len = s.n_dates();
    for i in 0..s.n_instruments() {
        for t in lag..t_len {
            out.set(i, t, s.get(i, t - lag));
        }
    }
    out
}

/// Applies the spec's transform, imputation and lags to raw factor series.
///
/// Every step only uses data at or before each date, so features never look
/// ahead.
pub fn prepare_features(
    raw: &[(String, FactorValues)],
    spec: &ModelSpec,
    epsilon: f64,
) -> Result<FeatureSet> {
    spec.validate()?;
    let mut names = Vec::new();
    let mut series = Vec::new();
    for (name, s) in raw {
        let base = match spec.transform {
            FeatureTransform::Zscore => robust_zscore_series(s, epsilon),
            FeatureTransform::None => s.clone(),
        };
        let base = impute_series(&base);
        names.push(name.clone());
        for lag in 1..=spec.lookback {
            names.push(format!("{name}__lag{lag}"));
            series.push(lagged(&base, lag));
        }
        series.insert(series.len() - spec.lookback, base);
    }
    Ok(FeatureSet { names, series })
}

/// Outcome of the walk-forward ridge search.
#[derive(Debug, Clone, PartialEq)]
pub struct WalkForwardFit {
    pub model: LinearModel,
    /// `(lambda, validation MSE)` per grid value that produced a model.
    pub valid_mse: Vec<(f64, f64)>,
}

/// Fits on the training range for every grid value and keeps the lowest
/// validation MSE (first value wins ties).
///
/// The last `horizon` dates of the training and validation ranges are left
/// out because their labels are realized inside the following range.
pub fn fit_walk_forward(
    features: &FeatureSet,
    targets: &FactorValues,
    split: &SplitSpec,
    ridge_grid: &[f64],
    horizon: usize,
) -> Result<WalkForwardFit> {
    split.validate(targets.n_dates())?;
    let embargo = |r: DateRange| r.embargoed(horizon).ok_or(PredictorError::EmptySampleSet);
    let train = assemble_from_series(&features.names, &features.series, targets, embargo(split.train)?)?;
    let valid = assemble_from_series(&features.names, &features.series, targets, embargo(split.valid)?)?;
    let mut best: Option<(LinearModel, f64)> = None;
    let mut valid_mse = Vec::new();
    for &lambda in ridge_grid {
        let model = match fit(&train, lambda) {
            Ok(m) => m,
            Err(PredictorError::SingularSystem) => continue,
            Err(e) => return Err(e),
        };
        let err = mse(&model, &valid);
        valid_mse.push((lambda, err));
        if best.as_ref().is_none_or(|(_, b)| err < *b) {
            best = Some((model, err));
        }
    }
    let (model, _) = best.ok_or(PredictorError::SingularSystem)?;
    Ok(WalkForwardFit { model, valid_mse })
}
