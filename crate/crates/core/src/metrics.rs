//! Factor predictive metrics and strategy performance metrics.
//!
//! Correlations drop NaN pairs pairwise and return NaN when either side has
//! zero variance. Standard deviations use the population convention
//! throughout, and annualization assumes [`TRADING_DAYS`] per year.

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::FactorValues;

pub const TRADING_DAYS: f64 = 252.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("need at least {needed} valid observations, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("daily return {value} at position {index} is <= -1")]
    InvalidReturn { index: usize, value: f64 },
    #[error("series mismatch: {0}")]
    Mismatch(String),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// Dated values: daily ICs or daily portfolio returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailySeries {
    pub dates: Vec<NaiveDate>,
    #[serde(with = "crate::serde_nan::vec")]
    pub values: Vec<f64>,
}

impl DailySeries {
    pub fn new(dates: Vec<NaiveDate>, values: Vec<f64>) -> Result<Self> {
        if dates.len() != values.len() {
            return Err(MetricsError::Mismatch(format!(
                "{} dates vs {} values",
                dates.len(),
                values.len()
            )));
        }
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MetricsError::Mismatch("dates must be strictly increasing".into()));
        }
        Ok(Self { dates, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// The eight summary metrics. `mdd` is stored signed (<= 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    #[serde(with = "crate::serde_nan")]
    pub ic: f64,
    #[serde(with = "crate::serde_nan")]
    pub icir: f64,
    #[serde(with = "crate::serde_nan")]
    pub rank_ic: f64,
    #[serde(with = "crate::serde_nan")]
    pub rank_icir: f64,
    #[serde(with = "crate::serde_nan")]
    pub arr: f64,
    #[serde(with = "crate::serde_nan")]
    pub ir: f64,
    #[serde(with = "crate::serde_nan")]
    pub mdd: f64,
    #[serde(with = "crate::serde_nan")]
    pub calmar: f64,
}

impl MetricsBundle {
    pub fn nan() -> Self {
        Self {
            ic: f64::NAN,
            icir: f64::NAN,
            rank_ic: f64::NAN,
            rank_icir: f64::NAN,
            arr: f64::NAN,
            ir: f64::NAN,
            mdd: f64::NAN,
            calmar: f64::NAN,
        }
    }

    pub fn from_parts(factor: &FactorMetrics, strategy: &StrategyMetrics) -> Self {
        Self {
            ic: factor.ic,
            icir: factor.icir,
            rank_ic: factor.rank_ic,
            rank_icir: factor.rank_icir,
            arr: strategy.arr,
            ir: strategy.ir,
            mdd: strategy.mdd,
            calmar: strategy.calmar,
        }
    }

    /// Bitwise comparison, NaN equal to NaN.
    pub fn bit_eq(&self, other: &Self) -> bool {
        let a = [
            self.ic, self.icir, self.rank_ic, self.rank_icir, self.arr, self.ir, self.mdd,
            self.calmar,
        ];
        let b = [
            other.ic,
            other.icir,
            other.rank_ic,
            other.rank_icir,
            other.arr,
            other.ir,
            other.mdd,
            other.calmar,
        ];
        a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits())
    }
}

fn paired(pred: &[f64], real: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if pred.len() != real.len() {
        return Err(MetricsError::Mismatch(format!(
            "cross-sections of length {} and {}",
            pred.len(),
            real.len()
        )));
    }
    let (a, b): (Vec<f64>, Vec<f64>) = pred
        .iter()
        .zip(real)
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|(x, y)| (*x, *y))
        .unzip();
    if a.len() < 2 {
        return Err(MetricsError::InsufficientData {
            needed: 2,
            got: a.len(),
        });
    }
    Ok((a, b))
}

/// Pearson correlation of two complete vectors; NaN on zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let constant = |xs: &[f64]| xs.iter().all(|x| *x == xs[0]);
    if saa == 0.0 || sbb == 0.0 || constant(a) || constant(b) {
        return f64::NAN;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// Average (1-based) ranks; tied values share the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut k = 0;
    while k < order.len() {
        let mut j = k;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[k]] {
            j += 1;
        }
        let avg = (k + j) as f64 / 2.0 + 1.0;
        for &idx in &order[k..=j] {
            ranks[idx] = avg;
        }
        k = j + 1;
    }
    ranks
}

/// Daily information coefficient: Pearson correlation of one cross-section.
pub fn ic_daily(pred: &[f64], real: &[f64]) -> Result<f64> {
    let (a, b) = paired(pred, real)?;
    Ok(pearson(&a, &b))
}

/// Daily rank IC: Spearman correlation (Pearson of average ranks).
pub fn rank_ic_daily(pred: &[f64], real: &[f64]) -> Result<f64> {
    let (a, b) = paired(pred, real)?;
    Ok(pearson(&average_ranks(&a), &average_ranks(&b)))
}

/// Mean and population standard deviation; the deviation is exactly zero for
/// a constant series.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.iter().all(|x| *x == xs[0]) {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Mean over standard deviation of a daily IC series. Non-finite entries are
/// skipped; zero dispersion gives NaN.
pub fn icir(series: &[f64]) -> Result<f64> {
    let xs: Vec<f64> = series.iter().copied().filter(|x| x.is_finite()).collect();
    if xs.len() < 2 {
        return Err(MetricsError::InsufficientData {
            needed: 2,
            got: xs.len(),
        });
    }
    let (m, sd) = mean_std(&xs);
    Ok(if sd == 0.0 { f64::NAN } else { m / sd })
}

/// The strategy half of [`MetricsBundle`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyMetrics {
    #[serde(with = "crate::serde_nan")]
    pub arr: f64,
    #[serde(with = "crate::serde_nan")]
    pub ir: f64,
    #[serde(with = "crate::serde_nan")]
    pub mdd: f64,
    #[serde(with = "crate::serde_nan")]
    pub calmar: f64,
}

/// Largest peak-to-trough decline of a NAV path, as a non-positive fraction.
pub fn max_drawdown(nav: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst = 0.0f64;
    for &p in nav {
        peak = peak.max(p);
        worst = worst.min(p / peak - 1.0);
    }
    worst
}

/// Compounded NAV path starting at 1.0 (length `returns.len() + 1`).
pub fn nav_from_returns(returns: &[f64]) -> Vec<f64> {
    let mut nav = Vec::with_capacity(returns.len() + 1);
    nav.push(1.0);
    for r in returns {
        let last = *nav.last().expect("non-empty");
        nav.push(last * (1.0 + r));
    }
    nav
}

/// ARR, IR, MDD and Calmar from daily returns.
///
/// ARR compounds over `T = returns.len()` days; IR is the annualized
/// mean/std of returns in excess of `risk_free`; the drawdown path starts
/// from a NAV of 1 before the first return.
pub fn strategy_metrics(returns: &[f64], risk_free: f64) -> Result<StrategyMetrics> {
    if returns.is_empty() {
        return Err(MetricsError::InsufficientData { needed: 1, got: 0 });
    }
    if let Some((index, &value)) = returns
        .iter()
        .enumerate()
        .find(|(_, r)| !(r.is_finite() && **r > -1.0))
    {
        return Err(MetricsError::InvalidReturn { index, value });
    }
    let t = returns.len() as f64;
    let log_growth: f64 = returns.iter().map(|r| r.ln_1p()).sum();
    let arr = (log_growth * TRADING_DAYS / t).exp_m1();

    let excess: Vec<f64> = returns.iter().map(|r| r - risk_free).collect();
    let (m, sd) = mean_std(&excess);
    let ir = if sd == 0.0 {
        f64::NAN
    } else {
        m / sd * TRADING_DAYS.sqrt()
    };

    let mdd = max_drawdown(&nav_from_returns(returns));
    let calmar = if mdd == 0.0 { f64::NAN } else { arr / mdd.abs() };
    Ok(StrategyMetrics {
        arr,
        ir,
        mdd,
        calmar,
    })
}

/// Predictive metrics aggregated over a date range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorMetrics {
    #[serde(with = "crate::serde_nan")]
    pub ic: f64,
    #[serde(with = "crate::serde_nan")]
    pub icir: f64,
    #[serde(with = "crate::serde_nan")]
    pub rank_ic: f64,
    #[serde(with = "crate::serde_nan")]
    pub rank_icir: f64,
    pub daily_ic: DailySeries,
    pub daily_rank_ic: DailySeries,
}

/// Daily IC and Rank IC of `pred` against `realized` on dates
/// `first..=last`, then their means and IRs. Days without two valid pairs or
/// with zero dispersion are recorded as NaN and skipped in the aggregates.
pub fn factor_metrics(
    pred: &FactorValues,
    realized: &FactorValues,
    first: usize,
    last: usize,
) -> Result<FactorMetrics> {
    if !pred.same_grid(realized) {
        return Err(MetricsError::Mismatch("prediction and label grids differ".into()));
    }
    let mut dates = Vec::new();
    let mut ics = Vec::new();
    let mut rank_ics = Vec::new();
    for t in first..=last.min(pred.n_dates().saturating_sub(1)) {
        let (p, r) = (pred.cross_section(t), realized.cross_section(t));
        dates.push(pred.dates[t]);
        ics.push(ic_daily(&p, &r).unwrap_or(f64::NAN));
        rank_ics.push(rank_ic_daily(&p, &r).unwrap_or(f64::NAN));
    }
    let mean_of = |xs: &[f64]| {
        let v: Vec<f64> = xs.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(FactorMetrics {
        ic: mean_of(&ics),
        icir: icir(&ics).unwrap_or(f64::NAN),
        rank_ic: mean_of(&rank_ics),
        rank_icir: icir(&rank_ics).unwrap_or(f64::NAN),
        daily_ic: DailySeries::new(dates.clone(), ics)?,
        daily_rank_ic: DailySeries::new(dates, rank_ics)?,
    })
}

/// Mean IC and Rank IC of one calendar year.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YearlyIc {
    pub year: i32,
    /// Dates with a defined IC.
    pub days: usize,
    #[serde(with = "crate::serde_nan")]
    pub ic: f64,
    #[serde(with = "crate::serde_nan")]
    pub rank_ic: f64,
}

/// Groups the daily IC series of `m` by calendar year, skipping undefined days.
pub fn ic_by_year(m: &FactorMetrics) -> Vec<YearlyIc> {
    let mut out: Vec<YearlyIc> = Vec::new();
    let mut sums: Vec<(f64, usize, f64, usize)> = Vec::new();
    let pairs = m.daily_ic.values.iter().zip(&m.daily_rank_ic.values);
    for (d, (ic, ric)) in m.daily_ic.dates.iter().zip(pairs) {
        if out.last().is_none_or(|y| y.year != d.year()) {
            out.push(YearlyIc { year: d.year(), days: 0, ic: f64::NAN, rank_ic: f64::NAN });
            sums.push((0.0, 0, 0.0, 0));
        }
        let s = sums.last_mut().expect("pushed above");
        if ic.is_finite() {
            s.0 += ic;
            s.1 += 1;
        }
        if ric.is_finite() {
            s.2 += ric;
            s.3 += 1;
        }
    }
    for (y, (si, ni, sr, nr)) in out.iter_mut().zip(sums) {
        y.days = ni;
        y.ic = if ni > 0 { si / ni as f64 } else { f64::NAN };
        y.rank_ic = if nr > 0 { sr / nr as f64 } else { f64::NAN };
    }
    out
}
