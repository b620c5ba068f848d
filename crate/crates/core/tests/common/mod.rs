//! Test-only reference implementations and fixtures. Each oracle uses the
//! plainest formulation available rather than mirroring the library code.
#![allow(dead_code)]

use alphaloop::dsl::{BinOp, Expr, Func};
use alphaloop::panel::PanelTensor;
use chrono::NaiveDate;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub mod backtest_fuzz;
pub mod bandit_oracle;
pub mod dedup_cases;
pub mod loop_runs;

pub fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("I{i:03}")).collect()
}

pub fn days(n: usize) -> Vec<NaiveDate> {
    let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
    (0..n).map(|k| start + chrono::Duration::days(k as i64)).collect()
}

/// Panel from per-instrument closes; the other OHLCV fields are derived.
pub fn close_panel(closes: &[Vec<f64>]) -> PanelTensor {
    let n = closes.len();
    let t_len = closes[0].len();
    let fields: Vec<String> = ["open", "high", "low", "close", "volume"].iter().map(|s| s.to_string()).collect();
    let mut values = Vec::with_capacity(n * t_len * 5);
    for row in closes {
        for &c in row {
            values.extend_from_slice(&[c, c, c, c, 1000.0]);
        }
    }
    PanelTensor::new(ids(n), days(t_len), fields, values).unwrap()
}

/// Small random OHLCV panel with occasional NaN cells.
pub fn random_panel(rng: &mut ChaCha8Rng, n: usize, t_len: usize, nan_rate: f64) -> PanelTensor {
    let fields: Vec<String> = ["open", "high", "low", "close", "volume"].iter().map(|s| s.to_string()).collect();
    let mut values = Vec::with_capacity(n * t_len * 5);
    for _ in 0..n {
        let mut c: f64 = rng.random_range(5.0..50.0);
        for _ in 0..t_len {
            c *= 1.0 + rng.random_range(-0.05..0.05);
            let o = c * (1.0 + rng.random_range(-0.01..0.01));
            let h = c.max(o) * (1.0 + rng.random_range(0.0..0.01));
            let l = c.min(o) * (1.0 - rng.random_range(0.0..0.01));
            let v = rng.random_range(1e3..1e5f64).round();
            for x in [o, h, l, c, v] {
                values.push(if rng.random_bool(nan_rate) { f64::NAN } else { x });
            }
        }
    }
    PanelTensor::new(ids(n), days(t_len), fields, values).unwrap()
}

pub fn close_to(a: f64, b: f64, tol: f64) -> bool {
    (a.is_nan() && b.is_nan()) || (a - b).abs() <= tol * 1f64.max(a.abs()).max(b.abs())
}

// ---------------------------------------------------------------- DSL

fn fin(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::NAN
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn constant(xs: &[f64]) -> bool {
    xs.iter().all(|x| *x == xs[0])
}

/// Ordinary least squares of `ys` on `0..w` by solving the 2x2 normal equations.
fn line_fit(ys: &[f64]) -> (f64, f64) {
    let n = ys.len() as f64;
    let (mut sk, mut skk, mut sy, mut sky) = (0.0, 0.0, 0.0, 0.0);
    for (k, y) in ys.iter().enumerate() {
        let k = k as f64;
        sk += k;
        skk += k * k;
        sy += y;
        sky += k * y;
    }
    let det = n * skk - sk * sk;
    let slope = (n * sky - sk * sy) / det;
    let intercept = (sy - slope * sk) / n;
    (intercept, slope)
}

fn window_stat(f: Func, a: &[f64], b: &[f64]) -> f64 {
    match f {
        Func::Sum => a.iter().sum(),
        Func::Mean => mean(a),
        Func::Std => {
            let m = mean(a);
            (a.iter().map(|x| (x - m).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
        }
        Func::Corr => {
            if constant(a) || constant(b) {
                return f64::NAN;
            }
            let (ma, mb) = (mean(a), mean(b));
            let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
            let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
            cov / (va * vb).sqrt()
        }
        Func::Rsquare => {
            if a.len() < 2 || constant(a) {
                return f64::NAN;
            }
            let (c, s) = line_fit(a);
            let m = mean(a);
            let ss_res: f64 = a.iter().enumerate().map(|(k, y)| (y - c - s * k as f64).powi(2)).sum();
            let ss_tot: f64 = a.iter().map(|y| (y - m).powi(2)).sum();
            1.0 - ss_res / ss_tot
        }
        Func::Resi => {
            if a.len() < 2 {
                return f64::NAN;
            }
            let (c, s) = line_fit(a);
            a[a.len() - 1] - c - s * (a.len() - 1) as f64
        }
        _ => unreachable!(),
    }
}

/// Cell-by-cell reference evaluator: every window is re-gathered from the
/// child series and checked for NaN explicitly.
pub fn naive_eval(e: &Expr, p: &PanelTensor) -> Vec<f64> {
    let (n, t_len) = (p.n_instruments(), p.n_dates());
    let at = |i: usize, t: usize| i * t_len + t;
    match e {
        Expr::Field(name) => {
            let k = p.field_index(name).unwrap();
            let mut out = vec![0.0; n * t_len];
            for i in 0..n {
                for t in 0..t_len {
                    out[at(i, t)] = fin(p.get(i, t, k));
                }
            }
            out
        }
        Expr::Num(v) => vec![fin(*v); n * t_len],
        Expr::Neg(x) => naive_eval(x, p).into_iter().map(|v| -v).collect(),
        Expr::Binary(op, a, b) => {
            let (x, y) = (naive_eval(a, p), naive_eval(b, p));
            x.iter()
                .zip(&y)
                .map(|(l, r)| {
                    fin(match op {
                        BinOp::Add => l + r,
                        BinOp::Sub => l - r,
                        BinOp::Mul => l * r,
                        BinOp::Div => l / r,
                    })
                })
                .collect()
        }
        Expr::Call(f, args) => {
            let x = naive_eval(&args[0], p);
            match f {
                Func::Abs => x.into_iter().map(f64::abs).collect(),
                Func::Log => x.into_iter().map(|v| fin(v.ln())).collect(),
                Func::Less | Func::Greater => {
                    let y = naive_eval(&args[1], p);
                    x.iter()
                        .zip(&y)
                        .map(|(a, b)| {
                            if a.is_nan() || b.is_nan() {
                                f64::NAN
                            } else if (*f == Func::Less) == (a < b) {
                                *a
                            } else {
                                *b
                            }
                        })
                        .collect()
                }
                _ => {
                    let w = match args.last() {
                        Some(Expr::Num(w)) => *w as usize,
                        _ => unreachable!(),
                    };
                    let y = if *f == Func::Corr { naive_eval(&args[1], p) } else { x.clone() };
                    let mut out = vec![f64::NAN; n * t_len];
                    for i in 0..n {
                        for t in 0..t_len {
                            if *f == Func::Ref {
                                if t >= w {
                                    out[at(i, t)] = x[at(i, t - w)];
                                }
                                continue;
                            }
                            if t + 1 < w {
                                continue;
                            }
                            let a: Vec<f64> = (t + 1 - w..=t).map(|s| x[at(i, s)]).collect();
                            let b: Vec<f64> = (t + 1 - w..=t).map(|s| y[at(i, s)]).collect();
                            if a.iter().chain(&b).any(|v| v.is_nan()) {
                                continue;
                            }
                            out[at(i, t)] = fin(window_stat(*f, &a, &b));
                        }
                    }
                    out
                }
            }
        }
    }
}

/// Random expression over OHLCV fields, at most `depth` levels of operators.
pub fn random_expr(rng: &mut ChaCha8Rng, depth: usize) -> Expr {
    const FIELDS: [&str; 5] = ["open", "high", "low", "close", "volume"];
    if depth == 0 || rng.random_bool(0.25) {
        return if rng.random_bool(0.8) {
            Expr::field(FIELDS[rng.random_range(0..5)])
        } else {
            Expr::Num(rng.random_range(1..20) as f64 / 4.0)
        };
    }
    let sub = |rng: &mut ChaCha8Rng| random_expr(rng, depth - 1);
    match rng.random_range(0..16) {
        0 => Expr::bin(BinOp::Add, sub(rng), sub(rng)),
        1 => Expr::bin(BinOp::Sub, sub(rng), sub(rng)),
        2 => Expr::bin(BinOp::Mul, sub(rng), sub(rng)),
        3 => Expr::bin(BinOp::Div, sub(rng), sub(rng)),
        4 => Expr::Neg(Box::new(sub(rng))),
        k => {
            let f = Func::ALL[k - 5];
            let mut args: Vec<Expr> = (0..f.arity() - usize::from(f.takes_window())).map(|_| sub(rng)).collect();
            if f.takes_window() {
                // two-point fits and correlations are exact (0 or +-1), so they
                // only carry rounding noise into later comparisons
                let lo = if matches!(f, Func::Resi | Func::Rsquare | Func::Corr) { 3 } else { 1 };
                args.push(Expr::Num(rng.random_range(lo..7) as f64));
            }
            Expr::call(f, args)
        }
    }
}

// ---------------------------------------------------------------- metrics

/// Pearson correlation from pairwise differences.
pub fn pairwise_pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let (dx, dy) = (x[i] - x[j], y[i] - y[j]);
            sxy += dx * dy;
            sxx += dx * dx;
            syy += dy * dy;
        }
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

/// Ranks by counting: 1 + #smaller + (#equal - 1) / 2.
pub fn counting_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let less = x.iter().filter(|u| *u < v).count() as f64;
            let eq = x.iter().filter(|u| *u == v).count() as f64;
            1.0 + less + (eq - 1.0) / 2.0
        })
        .collect()
}

fn pairs(pred: &[f64], real: &[f64]) -> (Vec<f64>, Vec<f64>) {
    pred.iter()
        .zip(real)
        .filter(|(a, b)| a.is_finite() && b.is_finite())
        .map(|(a, b)| (*a, *b))
        .unzip()
}

pub fn oracle_ic(pred: &[f64], real: &[f64]) -> f64 {
    let (a, b) = pairs(pred, real);
    if a.len() < 2 {
        return f64::NAN;
    }
    pairwise_pearson(&a, &b)
}

pub fn oracle_rank_ic(pred: &[f64], real: &[f64]) -> f64 {
    let (a, b) = pairs(pred, real);
    if a.len() < 2 {
        return f64::NAN;
    }
    pairwise_pearson(&counting_ranks(&a), &counting_ranks(&b))
}

/// Mean over population standard deviation of the finite entries.
pub fn oracle_icir(xs: &[f64]) -> f64 {
    let v: Vec<f64> = xs.iter().copied().filter(|x| x.is_finite()).collect();
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    if var == 0.0 || constant(&v) {
        f64::NAN
    } else {
        m / var.sqrt()
    }
}

/// `(arr, ir, mdd, calmar)` with the drawdown taken over all peak/trough pairs.
pub fn oracle_strategy(returns: &[f64], rf: f64) -> (f64, f64, f64, f64) {
    let t = returns.len() as f64;
    let growth: f64 = returns.iter().map(|r| 1.0 + r).product();
    let arr = growth.powf(252.0 / t) - 1.0;
    let ex: Vec<f64> = returns.iter().map(|r| r - rf).collect();
    let ir = oracle_icir(&ex) * 252f64.sqrt();
    let mut nav = vec![1.0];
    for r in returns {
        nav.push(nav.last().unwrap() * (1.0 + r));
    }
    let mut mdd = 0.0f64;
    for i in 0..nav.len() {
        for j in i..nav.len() {
            mdd = mdd.min(nav[j] / nav[i] - 1.0);
        }
    }
    let calmar = if mdd == 0.0 { f64::NAN } else { arr / -mdd };
    (arr, ir, mdd, calmar)
}
