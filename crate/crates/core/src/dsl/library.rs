use serde::{Deserialize, Serialize};

use super::{parse, DslError, Expr};

/// JSON interchange form of one library entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormulaSpec {
    pub name: String,
    pub formula: String,
}

const ALPHA20: [(&str, &str); 20] = [
    ("RESI5", "Resi($close, 5)/$close"),
    (
        "WVMA5",
        "Std(Abs($close/Ref($close, 1)-1)*$volume, 5)/(Mean(Abs($close/Ref($close, 1)-1)*$volume, 5)+1e-12)",
    ),
    ("RSQR5", "Rsquare($close, 5)"),
    ("KLEN", "($high - $low)/$open"),
    ("RSQR10", "Rsquare($close, 10)"),
    ("CORR5", "Corr($close, Log($volume+1), 5)"),
    (
        "CORD5",
        "Corr($close/Ref($close, 1), Log($volume/Ref($volume, 1)+1), 5)",
    ),
    ("CORR10", "Corr($close, Log($volume+1), 10)"),
    ("ROC60", "Ref($close, 60)/$close"),
    ("RESI10", "Resi($close, 10)/$close"),
    ("VSTD5", "Std($volume, 5)/($volume+1e-12)"),
    ("RSQR60", "Rsquare($close, 60)"),
    ("CORR60", "Corr($close, Log($volume+1), 60)"),
    (
        "WVMA60",
        "Std(Abs($close/Ref($close, 1)-1)*$volume, 60)/(Mean(Abs($close/Ref($close, 1)-1)*$volume, 60)+1e-12)",
    ),
    ("STD5", "Std($close, 5)/$close"),
    ("RSQR20", "Rsquare($close, 20)"),
    (
        "CORD60",
        "Corr($close/Ref($close, 1), Log($volume/Ref($volume, 1)+1), 60)",
    ),
    (
        "CORD10",
        "Corr($close/Ref($close, 1), Log($volume/Ref($volume, 1)+1), 10)",
    ),
    ("CORR20", "Corr($close, Log($volume+1), 20)"),
    ("KLOW", "(Less($open, $close)-$low)/$open"),
];

/// The twenty baseline price-volume factors, as formula text.
pub fn alpha20_specs() -> Vec<FormulaSpec> {
    ALPHA20
        .iter()
        .map(|(name, formula)| FormulaSpec {
            name: name.to_string(),
            formula: formula.to_string(),
        })
        .collect()
}

/// The twenty baseline factors, parsed.
pub fn alpha20_library() -> Vec<(String, Expr)> {
    ALPHA20
        .iter()
        .map(|(name, formula)| {
            let expr = parse(formula).expect("built-in formula parses");
            (name.to_string(), expr)
        })
        .collect()
}

#[derive(Debug, thiserror::Error)]
pub enum LibraryError {
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("factor {name}: {source}")]
    Formula { name: String, source: DslError },
}

pub fn library_to_json(specs: &[FormulaSpec]) -> String {
    serde_json::to_string_pretty(specs).expect("plain strings serialize")
}

/// Parses a `[{name, formula}, ...]` document, validating every formula.
pub fn library_from_json(text: &str) -> Result<Vec<(String, Expr)>, LibraryError> {
    let specs: Vec<FormulaSpec> = serde_json::from_str(text)?;
    specs
        .into_iter()
        .map(|s| {
            parse(&s.formula)
                .map(|e| (s.name.clone(), e))
                .map_err(|source| LibraryError::Formula {
                    name: s.name,
                    source,
                })
        })
        .collect()
}
