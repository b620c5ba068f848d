//! Automated factor and model research over market panels.
//!
//! The crate is organised bottom-up:
//!
//! - [`panel`]: dense (instrument, date, field) tensors, CSV I/O, synthetic data,
//!   normalization, imputation and forward-return labels.
//! - [`dsl`]: the factor formula language and the Alpha-20 baseline library.
//! - [`predictor`]: ridge-regularized linear predictor and walk-forward splits.
//! - [`metrics`]: IC / Rank IC / ICIR and strategy metrics (ARR, IR, MDD, Calmar).
//! - [`backtest`]: daily top-k long-only simulator with transaction costs.
//! - [`validation`]: factor de-duplication and end-to-end experiment scoring.
//! - [`costeer`]: complexity-aware task scheduling with a knowledge base.
//! - [`bandit`]: two-armed linear Thompson sampling over the metric state.
//! - [`research`]: the hypothesis / implementation / validation / feedback loop.

pub mod backtest;
pub mod bandit;
pub mod costeer;
pub mod dsl;
pub mod metrics;
pub mod panel;
pub mod predictor;
pub mod research;
mod serde_nan;
pub mod validation;

pub use bandit::Action;
pub use panel::{FactorValues, LabelPanel, PanelTensor, PipelineConfig};
