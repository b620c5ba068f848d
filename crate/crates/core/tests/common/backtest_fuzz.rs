//! Randomized backtest cases and a trade-log replay audit.

use std::collections::BTreeMap;

use alphaloop::backtest::{BacktestReport, Side, StrategyConfig};
use alphaloop::panel::{FactorValues, PanelTensor};
use alphaloop::predictor::DateRange;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{close_panel, close_to};

pub struct Fuzz {
    pub panel: PanelTensor,
    pub scores: FactorValues,
    pub cfg: StrategyConfig,
}

pub fn fuzz_case(seed: u64) -> Fuzz {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..12);
    let t_len = rng.random_range(5..40);
    let closes: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let mut c = rng.random_range(1.0..100.0);
            (0..t_len)
                .map(|_| {
                    let jump = if rng.random_bool(0.05) { 1.12 } else { 1.0 };
                    c *= jump * (1.0 + rng.random_range(-0.04..0.04));
                    c
                })
                .collect()
        })
        .collect();
    let mut panel = close_panel(&closes);
    if rng.random_bool(0.5) {
        // punch holes in the close field
        let mut close = panel.field("close").unwrap();
        for v in close.values.iter_mut() {
            if rng.random_bool(0.05) {
                *v = f64::NAN;
            }
        }
        panel = panel.with_field_values("close", &close).unwrap();
    }
    let values = (0..n * t_len)
        .map(|_| if rng.random_bool(0.1) { f64::NAN } else { rng.random_range(-1.0..1.0) })
        .collect();
    let scores = FactorValues::like_panel(&panel, values);
    let topk = rng.random_range(1..=n);
    let cfg = StrategyConfig {
        topk,
        n_drop: rng.random_range(0..topk),
        buy_cost: rng.random_range(0.0..0.01),
        sell_cost: rng.random_range(0.0..0.01),
        min_fee: if rng.random_bool(0.5) { 5.0 } else { rng.random_range(0.0..50.0) },
        initial_cash: if rng.random_bool(0.3) { rng.random_range(10.0..2000.0) } else { 1e6 },
        ..StrategyConfig::default()
    };
    Fuzz { panel, scores, cfg }
}

/// Checks every accounting rule of a report against an independent replay of its trade log.
pub fn audit(f: &Fuzz, range: DateRange, rep: &BacktestReport) -> Result<(), String> {
    let close = f.panel.field("close").unwrap();
    let ids = f.panel.instruments();
    let idx: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mark = |i: usize, d: usize| (0..=d).rev().map(|s| close.get(i, s)).find(|v| v.is_finite()).unwrap_or(0.0);
    let mut prev_cash = f.cfg.initial_cash;
    let mut prev_pos: BTreeMap<String, f64> = BTreeMap::new();
    for (k, d) in (range.first..=range.last).enumerate() {
        let date = f.panel.dates()[d];
        let day: Vec<_> = rep.trades.iter().filter(|t| t.date == date).collect();
        let mut cash = prev_cash;
        let mut pos = prev_pos.clone();
        let mut fees = 0.0;
        for t in &day {
            let i = idx[t.instrument.as_str()];
            let notional = t.shares * t.price;
            let (p0, p1) = (close.get(i, d - 1), close.get(i, d));
            if t.price != p1 || (p1 / p0 - 1.0).abs() >= f.cfg.price_limit {
                return Err(format!("trade {t:?} breaks the close/limit rule"));
            }
            let rate = if t.side == Side::Buy { f.cfg.buy_cost } else { f.cfg.sell_cost };
            if !close_to(t.fee, (notional * rate).max(f.cfg.min_fee), 1e-9) {
                return Err(format!("fee {} for notional {notional} at rate {rate}", t.fee));
            }
            fees += t.fee;
            match t.side {
                Side::Buy => {
                    cash -= notional + t.fee;
                    *pos.entry(t.instrument.clone()).or_default() += t.shares;
                }
                Side::Sell => {
                    cash += notional - t.fee;
                    pos.remove(&t.instrument);
                }
            }
        }
        let scale = f.cfg.initial_cash.max(rep.nav.values[k]);
        if (cash.max(0.0) - rep.cash[k]).abs() > 1e-6 * scale {
            return Err(format!("day {k}: replayed cash {cash} vs {}", rep.cash[k]));
        }
        if rep.cash[k] < 0.0 {
            return Err(format!("day {k}: negative cash"));
        }
        if pos != rep.positions[k] || pos.values().any(|q| *q < 0.0) {
            return Err(format!("day {k}: positions diverge from the trade log"));
        }
        if !close_to(fees, rep.costs_paid[k], 1e-9) {
            return Err(format!("day {k}: costs {} vs fee sum {fees}", rep.costs_paid[k]));
        }
        let holdings: f64 = pos.iter().map(|(s, q)| q * mark(idx[s.as_str()], d)).sum();
        let nav = rep.nav.values[k];
        if (rep.cash[k] + holdings - nav).abs() > 1e-6 * nav.abs().max(1e-300) {
            return Err(format!("day {k}: cash + holdings {} vs nav {nav}", rep.cash[k] + holdings));
        }
        prev_cash = rep.cash[k];
        prev_pos = pos;
    }
    Ok(())
}
