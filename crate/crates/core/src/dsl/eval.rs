use rayon::prelude::*;

use super::{parse, DslError, Expr, Func};
use crate::panel::{FactorValues, PanelTensor};

/// Evaluates a formula over every (instrument, date) cell of `panel`.
///
/// Time-series operators look back along each instrument's own history:
/// windows include the current date and yield NaN unless all `w`
/// observations exist and are non-NaN. `Std` is the population standard
/// deviation; `Rsquare`/`Resi` regress the window on the index `0..w`.
/// Non-finite intermediate results (division by zero, `Log` of a
/// non-positive value) become NaN.
pub fn evaluate(expr: &Expr, panel: &PanelTensor) -> Result<FactorValues, DslError> {
    let ctx = Ctx {
        panel,
        n_dates: panel.n_dates(),
    };
    let values = ctx.eval(expr)?;
    Ok(FactorValues::like_panel(panel, values))
}

pub fn evaluate_str(text: &str, panel: &PanelTensor) -> Result<FactorValues, DslError> {
    evaluate(&parse(text)?, panel)
}

struct Ctx<'a> {
    panel: &'a PanelTensor,
    n_dates: usize,
}

#[inline]
fn finite_or_nan(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::NAN
    }
}

impl Ctx<'_> {
    fn eval(&self, expr: &Expr) -> Result<Vec<f64>, DslError> {
        let len = self.panel.n_instruments() * self.n_dates;
        Ok(match expr {
            Expr::Field(name) => {
                let p = self
                    .panel
                    .field_index(name)
                    .map_err(|_| DslError::FieldNotFound(name.clone()))?;
                self.panel
                    .field_at(p)
                    .values
                    .into_iter()
                    .map(finite_or_nan)
                    .collect()
            }
            Expr::Num(v) => vec![finite_or_nan(*v); len],
            Expr::Neg(e) => {
                let mut x = self.eval(e)?;
                x.iter_mut().for_each(|v| *v = -*v);
                x
            }
            Expr::Binary(op, a, b) => {
                let (mut x, y) = (self.eval(a)?, self.eval(b)?);
                x.iter_mut()
                    .zip(&y)
                    .for_each(|(l, r)| *l = finite_or_nan(op.apply(*l, *r)));
                x
            }
            Expr::Call(func, args) => self.call(*func, args)?,
        })
    }

    fn call(&self, func: Func, args: &[Expr]) -> Result<Vec<f64>, DslError> {
        let window = || match args.last() {
            Some(Expr::Num(w)) => *w as usize,
            _ => unreachable!("parser guarantees window literal"),
        };
        Ok(match func {
            Func::Abs => self.map1(&args[0], f64::abs)?,
            Func::Log => self.map1(&args[0], |v| finite_or_nan(v.ln()))?,
            Func::Less => self.map2(&args[0], &args[1], f64::min)?,
            Func::Greater => self.map2(&args[0], &args[1], f64::max)?,
            Func::Ref => {
                let d = window();
                let x = self.eval(&args[0])?;
                self.per_row(&x, None, |row, _, out| {
                    if d < row.len() {
                        out[d..].copy_from_slice(&row[..row.len() - d]);
                    }
                })
            }
            Func::Mean | Func::Sum | Func::Std | Func::Rsquare | Func::Resi => {
                let w = window();
                let x = self.eval(&args[0])?;
                let stat: fn(&[f64]) -> f64 = match func {
                    Func::Mean => window_mean,
                    Func::Sum => window_sum,
                    Func::Std => window_std,
                    Func::Rsquare => window_rsquare,
                    _ => window_resi,
                };
                self.rolling(&x, None, w, |a, _| stat(a))
            }
            Func::Corr => {
                let w = window();
                let x = self.eval(&args[0])?;
                let y = self.eval(&args[1])?;
                self.rolling(&x, Some(&y), w, |a, b| window_corr(a, b.expect("paired")))
            }
        })
    }

    fn map1(&self, e: &Expr, f: impl Fn(f64) -> f64) -> Result<Vec<f64>, DslError> {
        let mut x = self.eval(e)?;
        x.iter_mut().for_each(|v| *v = finite_or_nan(f(*v)));
        Ok(x)
    }

    fn map2(&self, a: &Expr, b: &Expr, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>, DslError> {
        let (mut x, y) = (self.eval(a)?, self.eval(b)?);
        x.iter_mut().zip(&y).for_each(|(l, r)| {
            // f64::min/max ignore a single NaN; windowless ops propagate it.
            *l = if l.is_nan() || r.is_nan() {
                f64::NAN
            } else {
                finite_or_nan(f(*l, *r))
            }
        });
        Ok(x)
    }

    /// Runs `f` on each instrument row in parallel; output rows start as NaN.
    fn per_row<F>(&self, x: &[f64], y: Option<&[f64]>, f: F) -> Vec<f64>
    where
        F: Fn(&[f64], Option<&[f64]>, &mut [f64]) + Sync,
    {
        let t_len = self.n_dates;
        let mut out = vec![f64::NAN; x.len()];
        if t_len == 0 {
            return out;
        }
        out.par_chunks_mut(t_len).enumerate().for_each(|(i, row_out)| {
            let row = &x[i * t_len..(i + 1) * t_len];
            let other = y.map(|y| &y[i * t_len..(i + 1) * t_len]);
            f(row, other, row_out);
        });
        out
    }

    /// Trailing-window statistic; windows containing NaN are skipped in O(1)
    /// using a running count of NaNs.
    fn rolling<F>(&self, x: &[f64], y: Option<&[f64]>, w: usize, stat: F) -> Vec<f64>
    where
        F: Fn(&[f64], Option<&[f64]>) -> f64 + Sync,
    {
        self.per_row(x, y, |row, other, out| {
            let n = row.len();
            let mut bad = vec![0usize; n + 1];
            for t in 0..n {
                let missing = row[t].is_nan() || other.is_some_and(|o| o[t].is_nan());
                bad[t + 1] = bad[t] + usize::from(missing);
            }
            for t in (w - 1)..n {
                let lo = t + 1 - w;
                if bad[t + 1] - bad[lo] == 0 {
                    out[t] = finite_or_nan(stat(&row[lo..=t], other.map(|o| &o[lo..=t])));
                }
            }
        })
    }
}

fn all_equal(a: &[f64]) -> bool {
    a.iter().all(|v| *v == a[0])
}

fn window_sum(a: &[f64]) -> f64 {
    a.iter().sum()
}

fn window_mean(a: &[f64]) -> f64 {
    window_sum(a) / a.len() as f64
}

fn window_std(a: &[f64]) -> f64 {
    let m = window_mean(a);
    (a.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / a.len() as f64).sqrt()
}

fn window_corr(a: &[f64], b: &[f64]) -> f64 {
    if all_equal(a) || all_equal(b) {
        return f64::NAN;
    }
    let (ma, mb) = (window_mean(a), window_mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    sab / (saa.sqrt() * sbb.sqrt())
}

/// `(Sxy, Sxx, Syy, ybar)` of the window regressed on `0..w`.
fn time_regression(a: &[f64]) -> (f64, f64, f64, f64) {
    let w = a.len();
    let kbar = (w as f64 - 1.0) / 2.0;
    let ybar = window_mean(a);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (k, y) in a.iter().enumerate() {
        let dk = k as f64 - kbar;
        let dy = y - ybar;
        sxy += dk * dy;
        sxx += dk * dk;
        syy += dy * dy;
    }
    (sxy, sxx, syy, ybar)
}

fn window_rsquare(a: &[f64]) -> f64 {
    if a.len() < 2 || all_equal(a) {
        return f64::NAN;
    }
    let (sxy, sxx, syy, _) = time_regression(a);
    sxy * sxy / (sxx * syy)
}

fn window_resi(a: &[f64]) -> f64 {
    if a.len() < 2 {
        return f64::NAN;
    }
    let (sxy, sxx, _, ybar) = time_regression(a);
    let w = a.len() as f64;
    let slope = sxy / sxx;
    let intercept = ybar - slope * (w - 1.0) / 2.0;
    a[a.len() - 1] - (intercept + slope * (w - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::read_panel;

    fn panel(closes: &[f64]) -> PanelTensor {
        let mut csv = String::from("datetime,instrument,close,volume\n");
        for (t, c) in closes.iter().enumerate() {
            csv.push_str(&format!("2020-01-{:02},A,{c},{}\n", t + 1, 100.0 + t as f64));
        }
        read_panel(csv.as_bytes(), &[]).unwrap()
    }

    fn eval(text: &str, p: &PanelTensor) -> Vec<f64> {
        evaluate_str(text, p).unwrap().values
    }

    fn assert_nan_close(got: &[f64], want: &[f64]) {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            assert!(
                (g.is_nan() && w.is_nan()) || (g - w).abs() < 1e-12,
                "got {got:?} want {want:?}"
            );
        }
    }

    #[test]
    fn shift_and_mean() {
        let p = panel(&[10.0, 11.0, 12.0]);
        assert_nan_close(&eval("Ref($close, 1)", &p), &[f64::NAN, 10.0, 11.0]);
        assert_nan_close(&eval("Mean($close, 2)", &p), &[f64::NAN, 10.5, 11.5]);
        assert_nan_close(&eval("Sum($close, 3)", &p), &[f64::NAN, f64::NAN, 33.0]);
    }

    #[test]
    fn self_correlation_and_linear_fit() {
        let p = panel(&[1.0, 2.0, 3.0, 4.0, 5.0, 4.0, 7.0]);
        let c = eval("Corr($close, $close, 5)", &p);
        assert!(c[..4].iter().all(|v| v.is_nan()));
        assert!(c[4..].iter().all(|v| (v - 1.0).abs() < 1e-12));
        let r = eval("Rsquare($close, 5)", &p);
        assert!((r[4] - 1.0).abs() < 1e-12);
        assert!(r[5] < 1.0);
        let e = eval("Resi($close, 5)", &p);
        assert!(e[4].abs() < 1e-12);
    }

    #[test]
    fn degenerate_windows_and_domains() {
        let p = panel(&[2.0, 2.0, 2.0, 3.0]);
        let c = eval("Corr($close, $volume, 3)", &p);
        assert!(c[2].is_nan(), "zero-variance window");
        assert!(!c[3].is_nan());
        assert!(eval("Rsquare($close, 3)", &p)[2].is_nan());
        assert_eq!(eval("Std($close, 3)", &p)[2], 0.0);
        assert!(eval("Log($close - 2)", &p)[0].is_nan());
        assert!(eval("$close / ($close - 2)", &p)[0].is_nan());
        assert_eq!(eval("Less($close, 2.5)", &p), vec![2.0, 2.0, 2.0, 2.5]);
        assert_eq!(eval("Greater($close, 2.5)", &p), vec![2.5, 2.5, 2.5, 3.0]);
        assert_eq!(eval("Abs(1 - $close)", &p), vec![1.0, 1.0, 1.0, 2.0]);
    }

    #[test]
    fn nan_inside_window_blocks_output() {
        let csv = "datetime,instrument,close,x\n2020-01-01,A,1,1\n2020-01-02,A,1,\n\
                   2020-01-03,A,1,3\n2020-01-04,A,1,4\n2020-01-05,A,1,5\n";
        let p = read_panel(csv.as_bytes(), &[]).unwrap();
        assert_nan_close(
            &eval("Mean($x, 2)", &p),
            &[f64::NAN, f64::NAN, f64::NAN, 3.5, 4.5],
        );
    }

    #[test]
    fn missing_field_is_error() {
        let p = panel(&[1.0, 2.0]);
        assert_eq!(
            evaluate_str("$vwap + 1", &p).unwrap_err(),
            DslError::FieldNotFound("vwap".into())
        );
    }
}
