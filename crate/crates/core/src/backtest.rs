//! Daily top-k long-only backtest with transaction costs and a limit rule.
//!
//! Scores dated `t` pick targets that are traded at the close of `t + 1`.
//! Holdings outside the target set are sold first, then new targets are
//! bought with equal shares of the available cash. Retained holdings are not
//! rebalanced. A trade is skipped when the instrument's close moved by at
//! least `price_limit` since the previous date.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{strategy_metrics, DailySeries, MetricsError, StrategyMetrics};
use crate::panel::{FactorValues, PanelError, PanelTensor, DATE_FORMAT};
use crate::predictor::DateRange;

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error("no scored instruments in the cross-section")]
    EmptyCrossSection,
    #[error("invalid strategy config: {0}")]
    InvalidConfig(String),
    #[error("score grid does not match the panel")]
    GridMismatch,
    #[error("date range {first}..={last} outside the panel's {n} dates")]
    BadRange { first: usize, last: usize, n: usize },
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = BacktestError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyConfig {
    pub topk: usize,
    pub n_drop: usize,
    pub buy_cost: f64,
    pub sell_cost: f64,
    pub min_fee: f64,
    pub price_limit: f64,
    pub initial_cash: f64,
    /// Held names ranked at or above this are kept. Defaults to `topk`.
    pub retention_rank: Option<usize>,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            topk: 50,
            n_drop: 5,
            buy_cost: 0.0005,
            sell_cost: 0.0015,
            min_fee: 5.0,
            price_limit: 0.095,
            initial_cash: 1e8,
            retention_rank: None,
        }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BacktestError::InvalidConfig(m.into()));
        if !(0.0..1.0).contains(&self.buy_cost) || !(0.0..1.0).contains(&self.sell_cost) {
            return bad("costs must lie in [0, 1)");
        }
        if self.topk <= self.n_drop {
            return bad("topk must exceed n_drop");
        }
        if !(self.initial_cash > 0.0 && self.initial_cash.is_finite()) {
            return bad("initial_cash must be positive");
        }
        if !(self.min_fee >= 0.0 && self.min_fee.is_finite()) {
            return bad("min_fee must be non-negative");
        }
        if self.price_limit.is_nan() || self.price_limit <= 0.0 {
            return bad("price_limit must be positive");
        }
        Ok(())
    }

    pub fn retention(&self) -> usize {
        self.retention_rank.unwrap_or(self.topk)
    }
}

/// Target set for one date, as instrument indices in rank order.
///
/// Scored names are ranked by score descending with ties broken by id.
/// The `n_drop` lowest-ranked held names are excluded (unscored held names
/// count as lowest), held names within `retention_rank` are kept, and the
/// remaining slots go to the best non-held names.
pub fn select_targets(
    scores: &[f64],
    instruments: &[String],
    held: &BTreeSet<usize>,
    cfg: &StrategyConfig,
) -> Result<Vec<usize>> {
    let mut ranked: Vec<usize> = (0..scores.len()).filter(|&i| scores[i].is_finite()).collect();
    if ranked.is_empty() {
        return Err(BacktestError::EmptyCrossSection);
    }
    ranked.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| instruments[a].cmp(&instruments[b]))
    });
    let rank_of: BTreeMap<usize, usize> = ranked.iter().enumerate().map(|(r, &i)| (i, r + 1)).collect();

    // Held names from worst to best: unscored first (by id, descending), then by rank.
    let mut held_worst_first: Vec<usize> = held.iter().copied().filter(|i| !rank_of.contains_key(i)).collect();
    held_worst_first.sort_by(|&a, &b| instruments[b].cmp(&instruments[a]));
    let mut held_scored: Vec<usize> = held.iter().copied().filter(|i| rank_of.contains_key(i)).collect();
    held_scored.sort_by_key(|i| std::cmp::Reverse(rank_of[i]));
    held_worst_first.extend(held_scored);
    let dropped: BTreeSet<usize> = held_worst_first.iter().take(cfg.n_drop).copied().collect();

    let mut targets: Vec<usize> = ranked
        .iter()
        .copied()
        .filter(|i| held.contains(i) && !dropped.contains(i) && rank_of[i] <= cfg.retention())
        .take(cfg.topk)
        .collect();
    let slots = cfg.topk - targets.len();
    targets.extend(ranked.iter().copied().filter(|i| !held.contains(i)).take(slots));
    targets.sort_by_key(|i| rank_of[i]);
    Ok(targets)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Buy,
    Sell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trade {
    pub date: NaiveDate,
    pub instrument: String,
    pub side: Side,
    pub shares: f64,
    pub price: f64,
    pub fee: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub nav: DailySeries,
    /// `nav[k + 1] / nav[k] - 1`, dated at the later day.
    pub daily_returns: DailySeries,
    pub cash: Vec<f64>,
    pub positions: Vec<BTreeMap<String, f64>>,
    pub costs_paid: Vec<f64>,
    pub trades: Vec<Trade>,
    pub warnings: Vec<String>,
}

impl BacktestReport {
    pub fn strategy_metrics(&self, risk_free: f64) -> Result<StrategyMetrics> {
        Ok(strategy_metrics(&self.daily_returns.values, risk_free)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_trades_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "date,instrument,side,shares,price,fee")?;
        for t in &self.trades {
            let side = match t.side {
                Side::Buy => "buy",
                Side::Sell => "sell",
            };
            writeln!(
                w,
                "{},{},{side},{},{},{}",
                t.date.format(DATE_FORMAT),
                t.instrument,
                t.shares,
                t.price,
                t.fee
            )?;
        }
        Ok(())
    }

    pub fn write_nav_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "date,nav")?;
        for (d, v) in self.nav.dates.iter().zip(&self.nav.values) {
            writeln!(w, "{},{v}", d.format(DATE_FORMAT))?;
        }
        Ok(())
    }
}

/// Fee for a trade of the given notional.
pub fn trade_fee(notional: f64, rate: f64, min_fee: f64) -> f64 {
    (notional * rate).max(min_fee)
}

/// Simulates the strategy over `range`. The first date only records the
/// initial cash; trading starts on the second.
pub fn run_backtest(
    scores: &FactorValues,
    panel: &PanelTensor,
    cfg: &StrategyConfig,
    range: DateRange,
) -> Result<BacktestReport> {
    cfg.validate()?;
    if scores.instruments != panel.instruments() || scores.dates != panel.dates() {
        return Err(BacktestError::GridMismatch);
    }
    let n_dates = panel.n_dates();
    if range.first > range.last || range.last >= n_dates {
        return Err(BacktestError::BadRange {
            first: range.first,
            last: range.last,
            n: n_dates,
        });
    }
    let close = panel.field("close")?;
    let ids = panel.instruments();

    let mut cash = cfg.initial_cash;
    let mut shares: BTreeMap<usize, f64> = BTreeMap::new();
    let mut last_price: BTreeMap<usize, f64> = BTreeMap::new();
    let mut report = BacktestReport {
        nav: DailySeries::new(vec![], vec![])?,
        daily_returns: DailySeries::new(vec![], vec![])?,
        cash: Vec::new(),
        positions: Vec::new(),
        costs_paid: Vec::new(),
        trades: Vec::new(),
        warnings: Vec::new(),
    };
    let mut nav_dates = Vec::new();
    let mut nav_values: Vec<f64> = Vec::new();

    for d in range.first..=range.last {
        let date = panel.dates()[d];
        let mut fees_today = 0.0;
        let tradable = |i: usize| -> Option<f64> {
            if d == 0 {
                return None;
            }
            let (p0, p1) = (close.get(i, d - 1), close.get(i, d));
            if !(p0.is_finite() && p1.is_finite()) {
                return None;
            }
            ((p1 / p0 - 1.0).abs() < cfg.price_limit).then_some(p1)
        };

        if d > range.first {
            let held: BTreeSet<usize> = shares.keys().copied().collect();
            let cross = scores.cross_section(d - 1);
            if let Ok(targets) = select_targets(&cross, ids, &held, cfg) {
                let target_set: BTreeSet<usize> = targets.iter().copied().collect();
                for &i in held.difference(&target_set) {
                    let Some(price) = tradable(i) else { continue };
                    let qty = shares[&i];
                    let notional = qty * price;
                    let fee = trade_fee(notional, cfg.sell_cost, cfg.min_fee);
                    if cash + notional - fee < 0.0 {
                        report
                            .warnings
                            .push(format!("{date}: sale of {} skipped, fee exceeds cash", ids[i]));
                        continue;
                    }
                    cash += notional - fee;
                    fees_today += fee;
                    shares.remove(&i);
                    report.trades.push(Trade {
                        date,
                        instrument: ids[i].clone(),
                        side: Side::Sell,
                        shares: qty,
                        price,
                        fee,
                    });
                }
                let buys: Vec<(usize, f64)> = targets
                    .iter()
                    .filter(|i| !shares.contains_key(i))
                    .filter_map(|&i| tradable(i).map(|p| (i, p)))
                    .collect();
                if !buys.is_empty() && cash > 0.0 {
                    let budget = cash / buys.len() as f64;
                    let c = cfg.buy_cost;
                    for (k, &(i, price)) in buys.iter().enumerate() {
                        let b = if k + 1 == buys.len() { cash } else { budget.min(cash) };
                        let (notional, fee) = if b * c / (1.0 + c) >= cfg.min_fee {
                            let notional = b / (1.0 + c);
                            (notional, notional * c)
                        } else {
                            (b - cfg.min_fee, cfg.min_fee)
                        };
                        if notional <= 0.0 {
                            continue;
                        }
                        let qty = notional / price;
                        cash -= notional + fee;
                        if cash < 0.0 {
                            // rounding residue of the exact budget split
                            cash = 0.0;
                        }
                        fees_today += fee;
                        shares.insert(i, qty);
                        report.trades.push(Trade {
                            date,
                            instrument: ids[i].clone(),
                            side: Side::Buy,
                            shares: qty,
                            price,
                            fee,
                        });
                    }
                }
            }
        }

        let mut holdings_value = 0.0;
        for (&i, &qty) in &shares {
            let p = close.get(i, d);
            let mark = if p.is_finite() {
                last_price.insert(i, p);
                p
            } else {
                report
                    .warnings
                    .push(format!("{date}: no close for held {}, carried at last price", ids[i]));
                last_price.get(&i).copied().unwrap_or(0.0)
            };
            holdings_value += qty * mark;
        }
        nav_dates.push(date);
        nav_values.push(cash + holdings_value);
        report.cash.push(cash);
        report
            .positions
            .push(shares.iter().map(|(&i, &q)| (ids[i].clone(), q)).collect());
        report.costs_paid.push(fees_today);
    }

    let returns: Vec<f64> = nav_values.windows(2).map(|w| w[1] / w[0] - 1.0).collect();
    report.daily_returns = DailySeries::new(nav_dates[1..].to_vec(), returns)?;
    report.nav = DailySeries::new(nav_dates, nav_values)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("S{i:03}")).collect()
    }

    #[test]
    fn cold_start_takes_top_scores() {
        let scores: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let cfg = StrategyConfig::default();
        let t = select_targets(&scores, &ids(100), &BTreeSet::new(), &cfg).unwrap();
        assert_eq!(t.len(), 50);
        assert_eq!(t[0], 99);
        assert!(t.iter().all(|&i| i >= 50));
    }

    #[test]
    fn retention_and_drop() {
        let scores: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let cfg = StrategyConfig::default();
        let held: BTreeSet<usize> = [99, 0, 50, 60, 70, 80, 90].into_iter().collect();
        let t = select_targets(&scores, &ids(100), &held, &cfg).unwrap();
        assert!(t.contains(&99));
        assert!(!t.contains(&0));
        // the five lowest held (0, 50, 60, 70, 80) go; 90 and 99 stay
        assert!(!t.contains(&80));
        assert!(t.contains(&90));
        assert_eq!(t.len(), 50);
    }

    #[test]
    fn ties_break_by_id() {
        let cfg = StrategyConfig {
            topk: 2,
            n_drop: 0,
            ..StrategyConfig::default()
        };
        let t = select_targets(&[1.0, 1.0, 1.0], &ids(3), &BTreeSet::new(), &cfg).unwrap();
        assert_eq!(t, vec![0, 1]);
        assert!(matches!(
            select_targets(&[f64::NAN], &ids(1), &BTreeSet::new(), &cfg),
            Err(BacktestError::EmptyCrossSection)
        ));
    }

    #[test]
    fn fee_floor() {
        assert_eq!(trade_fee(100.0, 0.0005, 5.0), 5.0);
        assert_eq!(trade_fee(1e6, 0.0015, 5.0), 1500.0);
    }
}
