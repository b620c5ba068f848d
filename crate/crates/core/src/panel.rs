//! Dual-indexed (instrument, date) market panel.
//!
//! A [`PanelTensor`] is a dense `N x T x P` array of `f64` stored
//! instrument-major, with `NaN` marking absent cells. Everything in here
//! returns new tensors; panels are never mutated after construction.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fields that must be strictly positive wherever present.
pub const PRICE_FIELDS: [&str; 4] = ["open", "high", "low", "close"];

/// The canonical OHLCV field order used by CSV ingestion and the synthetic generator.
pub const OHLCV: [&str; 5] = ["open", "high", "low", "close", "volume"];

pub const DATE_FORMAT: &str = "%Y-%m-%d";

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("duplicate row for ({date}, {instrument})")]
    DuplicateKey { date: NaiveDate, instrument: String },
    #[error("parse error at row {row}: {message}")]
    ParseError { row: usize, message: String },
    #[error("input contains no data rows")]
    EmptyInput,
    #[error("field not found: {0}")]
    FieldNotFound(String),
    #[error("invalid price {value} for {instrument} on {date} in field {field}")]
    InvalidPrice {
        instrument: String,
        date: NaiveDate,
        field: String,
        value: f64,
    },
    #[error("index mismatch: {0}")]
    IndexMismatch(String),
    #[error("invalid panel shape: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("price field {0} cannot be replaced by a normalized series")]
    PriceFieldTransform(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = PanelError> = std::result::Result<T, E>;

/// Preprocessing constants shared by the normalization and labelling steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub epsilon: f64,
    pub horizon_tau: usize,
    pub window_ell: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-12,
            horizon_tau: 1,
            window_ell: 60,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(PanelError::InvalidConfig("epsilon must be > 0".into()));
        }
        if self.horizon_tau < 1 || self.window_ell < 1 {
            return Err(PanelError::InvalidConfig(
                "horizon_tau and window_ell must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelTensor {
    instruments: Vec<String>,
    dates: Vec<NaiveDate>,
    fields: Vec<String>,
    values: Vec<f64>,
}

impl PanelTensor {
    /// Builds a panel after checking every structural invariant.
    ///
    /// `values` is indexed `(instrument, date, field)` with the field index
    /// varying fastest.
    pub fn new(
        instruments: Vec<String>,
        dates: Vec<NaiveDate>,
        fields: Vec<String>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PanelError::Shape("dates must be strictly increasing".into()));
        }
        if instruments.iter().collect::<BTreeSet<_>>().len() != instruments.len() {
            return Err(PanelError::Shape("instrument ids must be unique".into()));
        }
        if fields.iter().collect::<BTreeSet<_>>().len() != fields.len() {
            return Err(PanelError::Shape("field names must be unique".into()));
        }
        let expected = instruments.len() * dates.len() * fields.len();
        if values.len() != expected {
            return Err(PanelError::Shape(format!(
                "expected {expected} values, got {}",
                values.len()
            )));
        }
        let panel = Self {
            instruments,
            dates,
            fields,
            values,
        };
        panel.check_prices()?;
        Ok(panel)
    }

    fn check_prices(&self) -> Result<()> {
        for (p, field) in self.fields.iter().enumerate() {
            if !PRICE_FIELDS.contains(&field.as_str()) {
                continue;
            }
            for i in 0..self.n_instruments() {
                for t in 0..self.n_dates() {
                    let v = self.get(i, t, p);
                    if !v.is_nan() && !(v > 0.0 && v.is_finite()) {
                        return Err(PanelError::InvalidPrice {
                            instrument: self.instruments[i].clone(),
                            date: self.dates[t],
                            field: field.clone(),
                            value: v,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn instruments(&self) -> &[String] {
        &self.instruments
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn fields(&self) -> &[String] {
        &self.fields
    }

    pub fn n_instruments(&self) -> usize {
        self.instruments.len()
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn n_fields(&self) -> usize {
        self.fields.len()
    }

    /// `(instruments, dates, fields)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n_instruments(), self.n_dates(), self.n_fields())
    }

    pub fn raw_values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    fn offset(&self, i: usize, t: usize, p: usize) -> usize {
        (i * self.dates.len() + t) * self.fields.len() + p
    }

    #[inline]
    pub fn get(&self, i: usize, t: usize, p: usize) -> f64 {
        self.values[self.offset(i, t, p)]
    }

    pub fn field_index(&self, name: &str) -> Result<usize> {
        self.fields
            .iter()
            .position(|f| f == name)
            .ok_or_else(|| PanelError::FieldNotFound(name.to_string()))
    }

    pub fn has_field(&self, name: &str) -> bool {
        self.fields.iter().any(|f| f == name)
    }

    pub fn instrument_index(&self, id: &str) -> Option<usize> {
        self.instruments.iter().position(|s| s == id)
    }

    /// One field as an instrument-major `N x T` series.
    pub fn field(&self, name: &str) -> Result<FactorValues> {
        let p = self.field_index(name)?;
        Ok(self.field_at(p))
    }

    pub fn field_at(&self, p: usize) -> FactorValues {
        let (n, t_len, _) = self.dims();
        let mut values = Vec::with_capacity(n * t_len);
        for i in 0..n {
            for t in 0..t_len {
                values.push(self.get(i, t, p));
            }
        }
        FactorValues {
            instruments: self.instruments.clone(),
            dates: self.dates.clone(),
            values,
        }
    }

    /// Keeps only the named fields, in the given order.
    pub fn select_fields(&self, names: &[String]) -> Result<PanelTensor> {
        let idx = names
            .iter()
            .map(|n| self.field_index(n))
            .collect::<Result<Vec<_>>>()?;
        let (n, t_len, _) = self.dims();
        let mut values = Vec::with_capacity(n * t_len * idx.len());
        for i in 0..n {
            for t in 0..t_len {
                for &p in &idx {
                    values.push(self.get(i, t, p));
                }
            }
        }
        Ok(PanelTensor {
            instruments: self.instruments.clone(),
            dates: self.dates.clone(),
            fields: names.to_vec(),
            values,
        })
    }

    /// Drops every date after index `last` (inclusive bound).
    pub fn truncate_dates(&self, last: usize) -> PanelTensor {
        let keep = (last + 1).min(self.n_dates());
        let (n, _, p_len) = self.dims();
        let mut values = Vec::with_capacity(n * keep * p_len);
        for i in 0..n {
            let start = self.offset(i, 0, 0);
            values.extend_from_slice(&self.values[start..start + keep * p_len]);
        }
        PanelTensor {
            instruments: self.instruments.clone(),
            dates: self.dates[..keep].to_vec(),
            fields: self.fields.clone(),
            values,
        }
    }

    /// Rebuilds the panel with one field's series replaced. Positivity of price
    /// fields is rechecked.
    pub fn with_field_values(&self, name: &str, series: &FactorValues) -> Result<PanelTensor> {
        let p = self.field_index(name)?;
        self.check_grid(series)?;
        let mut out = self.clone();
        for i in 0..self.n_instruments() {
            for t in 0..self.n_dates() {
                let off = out.offset(i, t, p);
                out.values[off] = series.get(i, t);
            }
        }
        out.check_prices()?;
        Ok(out)
    }

    fn check_grid(&self, series: &FactorValues) -> Result<()> {
        if series.instruments != self.instruments {
            return Err(PanelError::IndexMismatch(
                "instrument index differs from panel".into(),
            ));
        }
        if series.dates != self.dates {
            return Err(PanelError::IndexMismatch("date index differs from panel".into()));
        }
        if series.values.len() != self.n_instruments() * self.n_dates() {
            return Err(PanelError::IndexMismatch("series length differs from grid".into()));
        }
        Ok(())
    }

    /// Smallest `name__k` (k >= 1) not already taken, or `name` itself when free.
    fn free_name(&self, taken: &BTreeSet<String>, name: &str) -> String {
        if !taken.contains(name) {
            return name.to_string();
        }
        (1..)
            .map(|k| format!("{name}__{k}"))
            .find(|cand| !taken.contains(cand))
            .expect("unbounded search")
    }
}

/// A single (instrument, date)-indexed series aligned to a panel grid.
///
/// Values are stored instrument-major (`i * T + t`), `NaN` where undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorValues {
    pub instruments: Vec<String>,
    pub dates: Vec<NaiveDate>,
    pub values: Vec<f64>,
}

impl FactorValues {
    pub fn filled(instruments: Vec<String>, dates: Vec<NaiveDate>, value: f64) -> Self {
        let len = instruments.len() * dates.len();
        Self {
            instruments,
            dates,
            values: vec![value; len],
        }
    }

    pub fn like_panel(panel: &PanelTensor, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), panel.n_instruments() * panel.n_dates());
        Self {
            instruments: panel.instruments.clone(),
            dates: panel.dates.clone(),
            values,
        }
    }

    pub fn n_instruments(&self) -> usize {
        self.instruments.len()
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    #[inline]
    pub fn get(&self, i: usize, t: usize) -> f64 {
        self.values[i * self.dates.len() + t]
    }

    #[inline]
    pub fn set(&mut self, i: usize, t: usize, v: f64) {
        let n_dates = self.dates.len();
        self.values[i * n_dates + t] = v;
    }

    /// Time series of one instrument.
    pub fn row(&self, i: usize) -> &[f64] {
        let t_len = self.dates.len();
        &self.values[i * t_len..(i + 1) * t_len]
    }

    /// Cross-section at one date.
    pub fn cross_section(&self, t: usize) -> Vec<f64> {
        (0..self.n_instruments()).map(|i| self.get(i, t)).collect()
    }

    pub fn same_grid(&self, other: &FactorValues) -> bool {
        self.instruments == other.instruments && self.dates == other.dates
    }

    /// Cell-wise equality treating two NaNs as equal.
    pub fn nan_eq(&self, other: &FactorValues) -> bool {
        self.same_grid(other)
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| (a.is_nan() && b.is_nan()) || a == b)
    }
}

/// Forward returns and their cross-sectional z-scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelPanel {
    pub horizon_tau: usize,
    pub raw: FactorValues,
    pub normalized: FactorValues,
}

fn parse_value(raw: &str, row: usize, column: &str) -> Result<f64> {
    let s = raw.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("nan") {
        return Ok(f64::NAN);
    }
    s.parse::<f64>().map_err(|e| PanelError::ParseError {
        row,
        message: format!("column {column}: {e} ({s:?})"),
    })
}

/// Reads a `datetime,instrument,<fields...>` CSV into a dense panel.
///
/// `schema` selects and orders the fields to keep; an empty schema keeps every
/// column after `instrument`. Row numbers in errors are 1-based data rows.
pub fn load_panel(path: impl AsRef<Path>, schema: &[String]) -> Result<PanelTensor> {
    let file = File::open(path.as_ref())?;
    read_panel(file, schema)
}

pub fn read_panel<R: std::io::Read>(reader: R, schema: &[String]) -> Result<PanelTensor> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.len() < 2 || header[0] != "datetime" || header[1] != "instrument" {
        return Err(PanelError::ParseError {
            row: 0,
            message: "header must start with datetime,instrument".into(),
        });
    }
    let fields: Vec<String> = if schema.is_empty() {
        header[2..].to_vec()
    } else {
        schema.to_vec()
    };
    let columns = fields
        .iter()
        .map(|f| {
            header
                .iter()
                .position(|h| h == f)
                .filter(|&c| c >= 2)
                .ok_or_else(|| PanelError::FieldNotFound(f.clone()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows: BTreeMap<(NaiveDate, String), Vec<f64>> = BTreeMap::new();
    for (n, record) in rdr.records().enumerate() {
        let row = n + 1;
        let record = record.map_err(|e| PanelError::ParseError {
            row,
            message: e.to_string(),
        })?;
        let date = NaiveDate::parse_from_str(record.get(0).unwrap_or(""), DATE_FORMAT).map_err(
            |e| PanelError::ParseError {
                row,
                message: format!("datetime: {e}"),
            },
        )?;
        let instrument = record.get(1).unwrap_or("").to_string();
        if instrument.is_empty() {
            return Err(PanelError::ParseError {
                row,
                message: "empty instrument id".into(),
            });
        }
        let vals = columns
            .iter()
            .zip(&fields)
            .map(|(&c, name)| parse_value(record.get(c).unwrap_or(""), row, name))
            .collect::<Result<Vec<_>>>()?;
        if rows.insert((date, instrument.clone()), vals).is_some() {
            return Err(PanelError::DuplicateKey { date, instrument });
        }
    }
    if rows.is_empty() {
        return Err(PanelError::EmptyInput);
    }

    let dates: Vec<NaiveDate> = rows
        .keys()
        .map(|(d, _)| *d)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let instruments: Vec<String> = rows
        .keys()
        .map(|(_, s)| s.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let date_pos: HashMap<NaiveDate, usize> =
        dates.iter().enumerate().map(|(k, d)| (*d, k)).collect();
    let inst_pos: HashMap<&str, usize> = instruments
        .iter()
        .enumerate()
        .map(|(k, s)| (s.as_str(), k))
        .collect();

    let p_len = fields.len();
    let mut values = vec![f64::NAN; instruments.len() * dates.len() * p_len];
    for ((date, inst), vals) in &rows {
        let off = (inst_pos[inst.as_str()] * dates.len() + date_pos[date]) * p_len;
        values[off..off + p_len].copy_from_slice(vals);
    }
    PanelTensor::new(instruments, dates, fields, values)
}

/// Writes the panel in the ingestion schema, rows sorted by (datetime, instrument).
///
/// Cells that are NaN in every field are omitted, so a load/write round trip
/// reproduces the original file's cells.
pub fn write_panel(panel: &PanelTensor, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    write_panel_to(panel, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_panel_to<W: Write>(panel: &PanelTensor, w: &mut W) -> Result<()> {
    let mut order: Vec<usize> = (0..panel.n_instruments()).collect();
    order.sort_by(|&a, &b| panel.instruments[a].cmp(&panel.instruments[b]));
    write!(w, "datetime,instrument")?;
    for f in &panel.fields {
        write!(w, ",{f}")?;
    }
    writeln!(w)?;
    for t in 0..panel.n_dates() {
        let date = panel.dates[t].format(DATE_FORMAT).to_string();
        for &i in &order {
            if (0..panel.n_fields()).all(|p| panel.get(i, t, p).is_nan()) {
                continue;
            }
            write!(w, "{date},{}", panel.instruments[i])?;
            for p in 0..panel.n_fields() {
                let v = panel.get(i, t, p);
                if v.is_nan() {
                    write!(w, ",")?;
                } else {
                    write!(w, ",{v}")?;
                }
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

/// A synthetic panel plus the hidden score that drives its next-day returns.
#[derive(Debug, Clone)]
pub struct SyntheticPanel {
    pub panel: PanelTensor,
    /// Cross-sectionally standardized score at (i, t); predicts the return from t to t+1.
    pub planted_score: FactorValues,
}

/// Window of idiosyncratic shocks summed into the planted score.
pub const PLANTED_WINDOW: usize = 5;

/// Correlation between the planted score and the next idiosyncratic return
/// is `PLANTED_LOADING * signal_strength`.
pub const PLANTED_LOADING: f64 = 0.5;

/// Geometric random-walk OHLCV panel with a planted momentum-like signal.
pub fn gen_synthetic(
    n_instruments: usize,
    n_dates: usize,
    seed: u64,
    signal_strength: f64,
) -> Result<PanelTensor> {
    Ok(gen_synthetic_with_signal(n_instruments, n_dates, seed, signal_strength)?.panel)
}

/// Like [`gen_synthetic`], also returning the planted score.
///
/// Log returns follow `m_t + sigma * (rho * z_{i,t-1} + sqrt(1 - rho^2) * e_{i,t})`
/// where `z` is the cross-sectional z-score of the trailing sum of the last
/// [`PLANTED_WINDOW`] idiosyncratic shocks `e`. Because `z` only depends on past
/// shocks, prices stay stationary in their log-increments while the trailing
/// return remains a strong observable proxy for `z`.
pub fn gen_synthetic_with_signal(
    n_instruments: usize,
    n_dates: usize,
    seed: u64,
    signal_strength: f64,
) -> Result<SyntheticPanel> {
    if n_instruments < 2 {
        return Err(PanelError::InvalidConfig("n_instruments must be >= 2".into()));
    }
    if n_dates < 10 {
        return Err(PanelError::InvalidConfig("n_dates must be >= 10".into()));
    }
    if !(0.0..=1.0).contains(&signal_strength) {
        return Err(PanelError::InvalidConfig(
            "signal_strength must lie in [0, 1]".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rho = PLANTED_LOADING * signal_strength;
    let idio = (1.0 - rho * rho).sqrt();
    let sigma = 0.02;

    let instruments: Vec<String> = (0..n_instruments).map(|i| format!("SYN{i:04}")).collect();
    let start = NaiveDate::from_ymd_opt(2015, 1, 5).expect("valid date");
    let dates: Vec<NaiveDate> = (0..n_dates)
        .scan(start, |d, k| {
            if k > 0 {
                *d = next_weekday(*d);
            }
            Some(*d)
        })
        .collect();

    let n = n_instruments;
    let mut shocks = vec![vec![0.0f64; n]; n_dates];
    let mut score = vec![vec![0.0f64; n]; n_dates];
    let mut close = vec![vec![0.0f64; n]; n_dates];
    let mut log_ret = vec![vec![0.0f64; n]; n_dates];

    let base_price: Vec<f64> = (0..n)
        .map(|_| 10.0 * (rng.random::<f64>() * 2.0).exp())
        .collect();
    let base_volume: Vec<f64> = (0..n).map(|_| 13.0 + rng.random::<f64>() * 2.0).collect();

    for t in 0..n_dates {
        let market: f64 = 0.0003 + 0.01 * rng.sample::<f64, _>(StandardNormal);
        for s in shocks[t].iter_mut() {
            *s = rng.sample(StandardNormal);
        }
        for i in 0..n {
            let r = if t == 0 {
                0.0
            } else {
                market + sigma * (rho * score[t - 1][i] + idio * shocks[t][i])
            };
            log_ret[t][i] = r;
            close[t][i] = if t == 0 {
                base_price[i]
            } else {
                close[t - 1][i] * r.exp()
            };
        }
        let lo = t.saturating_sub(PLANTED_WINDOW - 1);
        let trailing: Vec<f64> = (0..n)
            .map(|i| (lo..=t).map(|k| shocks[k][i]).sum())
            .collect();
        let mean = trailing.iter().sum::<f64>() / n as f64;
        let sd = (trailing.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        for i in 0..n {
            score[t][i] = if sd > 0.0 { (trailing[i] - mean) / sd } else { 0.0 };
        }
    }

    let fields: Vec<String> = OHLCV.iter().map(|s| s.to_string()).collect();
    let mut values = Vec::with_capacity(n * n_dates * 5);
    let mut planted = Vec::with_capacity(n * n_dates);
    // Second pass draws intraday noise instrument by instrument so the close
    // path above is independent of the OHLV decoration.
    for i in 0..n {
        for t in 0..n_dates {
            let c = close[t][i];
            let prev = if t == 0 { c } else { close[t - 1][i] };
            let open = prev * (0.003 * rng.sample::<f64, _>(StandardNormal)).exp();
            let hi_noise: f64 = rng.sample::<f64, _>(StandardNormal);
            let lo_noise: f64 = rng.sample::<f64, _>(StandardNormal);
            let high = open.max(c) * (0.005 * hi_noise.abs()).exp();
            let low = open.min(c) * (-0.005 * lo_noise.abs()).exp();
            let vol_noise: f64 = rng.sample(StandardNormal);
            let volume =
                (base_volume[i] + 0.3 * vol_noise + 8.0 * log_ret[t][i].abs()).exp().round();
            values.extend_from_slice(&[open, high, low, c, volume.max(1.0)]);
            planted.push(score[t][i]);
        }
    }
    let panel = PanelTensor::new(instruments, dates, fields, values)?;
    let planted_score = FactorValues::like_panel(&panel, planted);
    Ok(SyntheticPanel {
        panel,
        planted_score,
    })
}

fn next_weekday(d: NaiveDate) -> NaiveDate {
    use chrono::{Datelike, Weekday};
    let mut n = d.succ_opt().expect("date in range");
    while matches!(n.weekday(), Weekday::Sat | Weekday::Sun) {
        n = n.succ_opt().expect("date in range");
    }
    n
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// `(median, MAD)` of the non-NaN entries, MAD unscaled. `None` when empty.
pub fn median_mad(xs: &[f64]) -> Option<(f64, f64)> {
    let mut v: Vec<f64> = xs.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let med = median(&v);
    let mut dev: Vec<f64> = v.iter().map(|x| (x - med).abs()).collect();
    dev.sort_by(|a, b| a.total_cmp(b));
    Some((med, median(&dev)))
}

/// Per-date robust z-score of one series: `(x - median) / (MAD + eps)`.
pub fn robust_zscore_series(series: &FactorValues, epsilon: f64) -> FactorValues {
    let mut out = series.clone();
    for t in 0..series.n_dates() {
        let xs = series.cross_section(t);
        if let Some((med, mad)) = median_mad(&xs) {
            for (i, x) in xs.iter().enumerate() {
                if !x.is_nan() {
                    out.set(i, t, (x - med) / (mad + epsilon));
                }
            }
        }
    }
    out
}

/// Replaces `field` with its cross-sectional robust z-score and keeps the
/// original values under `raw_<field>`.
pub fn robust_zscore(panel: &PanelTensor, field: &str, cfg: &PipelineConfig) -> Result<PanelTensor> {
    cfg.validate()?;
    let original = panel.field(field)?;
    if PRICE_FIELDS.contains(&field) {
        return Err(PanelError::PriceFieldTransform(field.to_string()));
    }
    let z = robust_zscore_series(&original, cfg.epsilon);
    let with_raw = concat_features(panel, &[(format!("raw_{field}"), original)])?;
    with_raw.with_field_values(field, &z)
}

/// Forward fill, then cross-sectional mean, in a single pass over dates.
///
/// At each date, instruments whose previous value (after imputation) is
/// available take it; the rest take the mean of the date's slice after that
/// forward fill. A slice with nothing to average stays NaN.
pub fn impute_series(series: &FactorValues) -> FactorValues {
    let mut out = series.clone();
    let n = series.n_instruments();
    for t in 0..series.n_dates() {
        if t > 0 {
            for i in 0..n {
                if out.get(i, t).is_nan() {
                    let prev = out.get(i, t - 1);
                    if !prev.is_nan() {
                        out.set(i, t, prev);
                    }
                }
            }
        }
        let (sum, count) = (0..n)
            .map(|i| out.get(i, t))
            .filter(|x| !x.is_nan())
            .fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
        if count > 0 && count < n {
            let mean = sum / count as f64;
            for i in 0..n {
                if out.get(i, t).is_nan() {
                    out.set(i, t, mean);
                }
            }
        }
    }
    out
}

/// Applies [`impute_series`] to every field.
pub fn impute(panel: &PanelTensor) -> PanelTensor {
    let mut out = panel.clone();
    for p in 0..panel.n_fields() {
        let filled = impute_series(&panel.field_at(p));
        for i in 0..panel.n_instruments() {
            for t in 0..panel.n_dates() {
                let off = out.offset(i, t, p);
                out.values[off] = filled.get(i, t);
            }
        }
    }
    out
}

/// Per-date `(x - mean) / (std + eps)` with the population standard deviation.
pub fn cs_zscore_series(series: &FactorValues, epsilon: f64) -> FactorValues {
    let mut out = series.clone();
    for t in 0..series.n_dates() {
        let xs = series.cross_section(t);
        let valid: Vec<f64> = xs.iter().copied().filter(|x| !x.is_nan()).collect();
        if valid.is_empty() {
            continue;
        }
        let m = valid.iter().sum::<f64>() / valid.len() as f64;
        let sd = (valid.iter().map(|x| (x - m).powi(2)).sum::<f64>() / valid.len() as f64).sqrt();
        for (i, x) in xs.iter().enumerate() {
            if !x.is_nan() {
                out.set(i, t, (x - m) / (sd + epsilon));
            }
        }
    }
    out
}

/// Forward returns over `horizon_tau` days and their per-date z-scores.
pub fn compute_labels(panel: &PanelTensor, cfg: &PipelineConfig) -> Result<LabelPanel> {
    cfg.validate()?;
    let close = panel.field("close")?;
    for i in 0..close.n_instruments() {
        for t in 0..close.n_dates() {
            let v = close.get(i, t);
            if !v.is_nan() && v <= 0.0 {
                return Err(PanelError::InvalidPrice {
                    instrument: close.instruments[i].clone(),
                    date: close.dates[t],
                    field: "close".into(),
                    value: v,
                });
            }
        }
    }
    let tau = cfg.horizon_tau;
    let mut raw = FactorValues::filled(close.instruments.clone(), close.dates.clone(), f64::NAN);
    for i in 0..close.n_instruments() {
        for t in 0..close.n_dates().saturating_sub(tau) {
            let (p0, p1) = (close.get(i, t), close.get(i, t + tau));
            raw.set(i, t, (p1 - p0) / p0);
        }
    }
    let normalized = cs_zscore_series(&raw, cfg.epsilon);
    Ok(LabelPanel {
        horizon_tau: tau,
        raw,
        normalized,
    })
}

/// Appends new factor series as fields. A clashing name gets the smallest free
/// `__k` suffix.
pub fn concat_features(
    panel: &PanelTensor,
    new_factors: &[(String, FactorValues)],
) -> Result<PanelTensor> {
    if new_factors.is_empty() {
        return Ok(panel.clone());
    }
    for (name, series) in new_factors {
        panel
            .check_grid(series)
            .map_err(|e| PanelError::IndexMismatch(format!("factor {name}: {e}")))?;
    }
    let mut taken: BTreeSet<String> = panel.fields.iter().cloned().collect();
    let mut fields = panel.fields.clone();
    for (name, _) in new_factors {
        let resolved = panel.free_name(&taken, name);
        taken.insert(resolved.clone());
        fields.push(resolved);
    }
    let (n, t_len, p_old) = panel.dims();
    let p_new = fields.len();
    let mut values = Vec::with_capacity(n * t_len * p_new);
    for i in 0..n {
        for t in 0..t_len {
            let off = panel.offset(i, t, 0);
            values.extend_from_slice(&panel.values[off..off + p_old]);
            for (_, series) in new_factors {
                values.push(series.get(i, t));
            }
        }
    }
    PanelTensor::new(panel.instruments.clone(), panel.dates.clone(), fields, values)
}
