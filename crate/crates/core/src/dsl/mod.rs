//! Factor formula language.
//!
//! Formulas reference panel fields with a `$` prefix and compose them with
//! arithmetic and a closed set of time-series operators:
//!
//! ```text
//! (Less($open, $close) - $low) / $open
//! Corr($close / Ref($close, 1), Log($volume / Ref($volume, 1) + 1), 10)
//! ```
//!
//! Window arguments are positive integer literals. Evaluation is per
//! instrument along the date axis; see [`evaluate`].

mod eval;
mod library;
mod parser;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use eval::{evaluate, evaluate_str};
pub use library::{
    alpha20_library, alpha20_specs, library_from_json, library_to_json, FormulaSpec, LibraryError,
};
pub use parser::parse;

pub use crate::panel::FactorValues;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DslError {
    #[error("syntax error at byte {offset}: {message}")]
    SyntaxError { offset: usize, message: String },
    #[error("unknown operator: {0}")]
    UnknownOp(String),
    #[error("{op} expects {expected} arguments, got {got}")]
    ArityError {
        op: String,
        expected: usize,
        got: usize,
    },
    #[error("{op}: window argument must be a positive integer literal")]
    BadWindow { op: String },
    #[error("field not found: {0}")]
    FieldNotFound(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    pub fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
        }
    }

    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }
}

/// The operator table. Arity counts every argument including the window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Func {
    Ref,
    Mean,
    Std,
    Sum,
    Corr,
    Rsquare,
    Resi,
    Less,
    Greater,
    Abs,
    Log,
}

impl Func {
    pub const ALL: [Func; 11] = [
        Func::Ref,
        Func::Mean,
        Func::Std,
        Func::Sum,
        Func::Corr,
        Func::Rsquare,
        Func::Resi,
        Func::Less,
        Func::Greater,
        Func::Abs,
        Func::Log,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Func::Ref => "Ref",
            Func::Mean => "Mean",
            Func::Std => "Std",
            Func::Sum => "Sum",
            Func::Corr => "Corr",
            Func::Rsquare => "Rsquare",
            Func::Resi => "Resi",
            Func::Less => "Less",
            Func::Greater => "Greater",
            Func::Abs => "Abs",
            Func::Log => "Log",
        }
    }

    pub fn from_name(name: &str) -> Option<Func> {
        Func::ALL.into_iter().find(|f| f.name() == name)
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Abs | Func::Log => 1,
            Func::Corr => 3,
            _ => 2,
        }
    }

    /// Whether the last argument is a window/lag literal.
    pub fn takes_window(self) -> bool {
        !matches!(self, Func::Less | Func::Greater | Func::Abs | Func::Log)
    }
}

impl fmt::Display for Func {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parsed factor formula.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    /// Field name without the `$` sigil.
    Field(String),
    Num(f64),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

impl Expr {
    pub fn field(name: &str) -> Expr {
        Expr::Field(name.to_string())
    }

    pub fn bin(op: BinOp, a: Expr, b: Expr) -> Expr {
        Expr::Binary(op, Box::new(a), Box::new(b))
    }

    pub fn call(func: Func, args: Vec<Expr>) -> Expr {
        Expr::Call(func, args)
    }

    /// Window literal of a windowed call, if this is one.
    pub fn window(&self) -> Option<usize> {
        match self {
            Expr::Call(f, args) if f.takes_window() => match args.last() {
                Some(Expr::Num(w)) => Some(*w as usize),
                _ => None,
            },
            _ => None,
        }
    }

    /// Height of the tree; leaves have depth 1 and window literals do not count.
    pub fn depth(&self) -> usize {
        match self {
            Expr::Field(_) | Expr::Num(_) => 1,
            Expr::Neg(e) => 1 + e.depth(),
            Expr::Binary(_, a, b) => 1 + a.depth().max(b.depth()),
            Expr::Call(f, args) => {
                let n = if f.takes_window() { args.len() - 1 } else { args.len() };
                1 + args[..n].iter().map(Expr::depth).max().unwrap_or(0)
            }
        }
    }

    /// Distinct field names referenced, in first-use order.
    pub fn fields(&self) -> Vec<String> {
        fn walk(e: &Expr, out: &mut Vec<String>) {
            match e {
                Expr::Field(name) => {
                    if !out.contains(name) {
                        out.push(name.clone());
                    }
                }
                Expr::Num(_) => {}
                Expr::Neg(x) => walk(x, out),
                Expr::Binary(_, a, b) => {
                    walk(a, out);
                    walk(b, out);
                }
                Expr::Call(_, args) => args.iter().for_each(|a| walk(a, out)),
            }
        }
        let mut out = Vec::new();
        walk(self, &mut out);
        out
    }

    /// Largest lookback (in observations) needed before the first defined value.
    pub fn warmup(&self) -> usize {
        match self {
            Expr::Field(_) | Expr::Num(_) => 0,
            Expr::Neg(e) => e.warmup(),
            Expr::Binary(_, a, b) => a.warmup().max(b.warmup()),
            Expr::Call(f, args) => {
                let inner = args
                    .iter()
                    .take(if f.takes_window() { args.len() - 1 } else { args.len() })
                    .map(Expr::warmup)
                    .max()
                    .unwrap_or(0);
                match (f, self.window()) {
                    (Func::Ref, Some(d)) => inner + d,
                    (_, Some(w)) => inner + w - 1,
                    _ => inner,
                }
            }
        }
    }
}

fn fmt_num(v: f64, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    if v < 0.0 || (v == 0.0 && v.is_sign_negative()) {
        write!(f, "(-{:?})", -v)
    } else {
        write!(f, "{v:?}")
    }
}

/// Pretty-printing is fully parenthesized, so it always reparses to an equal tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Field(name) => write!(f, "${name}"),
            Expr::Num(v) => fmt_num(*v, f),
            Expr::Neg(e) => write!(f, "-({e})"),
            Expr::Binary(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::Call(func, args) => {
                write!(f, "{func}(")?;
                for (k, a) in args.iter().enumerate() {
                    if k > 0 {
                        f.write_str(", ")?;
                    }
                    match a {
                        // window literals print as integers
                        Expr::Num(w) if func.takes_window() && k == args.len() - 1 => {
                            write!(f, "{}", *w as u64)?
                        }
                        _ => write!(f, "{a}")?,
                    }
                }
                f.write_str(")")
            }
        }
    }
}
