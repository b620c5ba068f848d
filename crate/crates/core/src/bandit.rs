//! Two-armed linear Thompson sampling over the 8-channel metric state.
//!
//! Each arm keeps a Gaussian posterior over reward weights, parameterized by
//! mean and precision. Choosing samples one weight vector per arm and takes
//! the arm whose sampled reward `theta . x` is larger.

use nalgebra::{Cholesky, SMatrix, SVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::MetricsBundle;

pub const STATE_DIM: usize = 8;

pub type StateVector = [f64; STATE_DIM];
type Vec8 = SVector<f64, STATE_DIM>;
type Mat8 = SMatrix<f64, STATE_DIM, STATE_DIM>;

/// Names of the state channels, in vector order.
pub const STATE_CHANNELS: [&str; STATE_DIM] =
    ["ic", "icir", "rank_ic", "rank_icir", "arr", "ir", "neg_mdd", "sr"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BanditError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("numerical failure: {0}")]
    NumericalError(String),
}

pub type Result<T, E = BanditError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Factor,
    Model,
}

impl Action {
    pub const BOTH: [Action; 2] = [Action::Factor, Action::Model];

    pub fn as_str(self) -> &'static str {
        match self {
            Action::Factor => "factor",
            Action::Model => "model",
        }
    }
}

impl std::fmt::Display for Action {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Action {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "factor" => Ok(Action::Factor),
            "model" => Ok(Action::Model),
            other => Err(format!("unknown action {other:?}")),
        }
    }
}

/// Metric vector in channel order, with NaN channels set to 0.
///
/// The drawdown channel is the negated drawdown magnitude `-|mdd|`, so a
/// deeper drawdown lowers it. SR equals IR because the benchmark is the
/// risk-free rate.
pub fn state_vector(m: &MetricsBundle) -> StateVector {
    let raw = [m.ic, m.icir, m.rank_ic, m.rank_icir, m.arr, m.ir, -m.mdd.abs(), m.ir];
    raw.map(|v| if v.is_finite() { v } else { 0.0 })
}

pub fn weighted_score(m: &MetricsBundle, w: &StateVector) -> f64 {
    state_vector(m).iter().zip(w).map(|(a, b)| a * b).sum()
}

/// `w . (x_new - x_incumbent)`.
pub fn reward_from_metrics(new: &MetricsBundle, incumbent: &MetricsBundle, w: &StateVector) -> f64 {
    let (a, b) = (state_vector(new), state_vector(incumbent));
    (0..STATE_DIM).map(|k| w[k] * (a[k] - b[k])).sum()
}

pub const UNIFORM_WEIGHTS: StateVector = [1.0 / 8.0; STATE_DIM];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ArmJson", try_from = "ArmJson")]
pub struct ArmPosterior {
    pub mu: Vec8,
    pub precision: Mat8,
}

#[derive(Serialize, Deserialize)]
struct ArmJson {
    mu: Vec<f64>,
    /// Row-major.
    precision: Vec<f64>,
}

impl From<ArmPosterior> for ArmJson {
    fn from(a: ArmPosterior) -> Self {
        let precision = (0..STATE_DIM)
            .flat_map(|r| (0..STATE_DIM).map(move |c| (r, c)))
            .map(|(r, c)| a.precision[(r, c)])
            .collect();
        ArmJson {
            mu: a.mu.iter().copied().collect(),
            precision,
        }
    }
}

impl TryFrom<ArmJson> for ArmPosterior {
    type Error = String;

    fn try_from(j: ArmJson) -> std::result::Result<Self, String> {
        if j.mu.len() != STATE_DIM || j.precision.len() != STATE_DIM * STATE_DIM {
            return Err("arm posterior must have an 8-vector and an 8x8 matrix".into());
        }
        Ok(ArmPosterior {
            mu: Vec8::from_column_slice(&j.mu),
            precision: Mat8::from_row_slice(&j.precision),
        })
    }
}

impl ArmPosterior {
    fn prior(tau: f64) -> Self {
        Self {
            mu: Vec8::zeros(),
            precision: Mat8::identity() / (tau * tau),
        }
    }

    /// Draws `theta ~ N(mu, precision^-1)`.
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec8> {
        let chol = Cholesky::new(self.precision)
            .ok_or_else(|| BanditError::NumericalError("precision is not positive definite".into()))?;
        let cov = chol.inverse();
        let cov = (cov + cov.transpose()) * 0.5;
        let l = Cholesky::new(cov)
            .ok_or_else(|| BanditError::NumericalError("covariance is not positive definite".into()))?
            .unpack();
        let z = Vec8::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        Ok(self.mu + l * z)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditState {
    pub factor: ArmPosterior,
    pub model: ArmPosterior,
    pub tau: f64,
    pub sigma: f64,
    pub w: StateVector,
}

impl BanditState {
    pub fn init(tau: f64, sigma: f64, w: StateVector) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(BanditError::InvalidParameter(format!("tau must be > 0, got {tau}")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(BanditError::InvalidParameter(format!("sigma must be > 0, got {sigma}")));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(BanditError::InvalidParameter("reward weights must be finite".into()));
        }
        Ok(Self {
            factor: ArmPosterior::prior(tau),
            model: ArmPosterior::prior(tau),
            tau,
            sigma,
            w,
        })
    }

    pub fn arm(&self, a: Action) -> &ArmPosterior {
        match a {
            Action::Factor => &self.factor,
            Action::Model => &self.model,
        }
    }

    fn arm_mut(&mut self, a: Action) -> &mut ArmPosterior {
        match a {
            Action::Factor => &mut self.factor,
            Action::Model => &mut self.model,
        }
    }

    /// Sampled rewards `(factor, model)` for context `x`.
    pub fn sample_rewards<R: Rng + ?Sized>(&self, x: &StateVector, rng: &mut R) -> Result<(f64, f64)> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(BanditError::InvalidParameter("context must be finite".into()));
        }
        let xv = Vec8::from_column_slice(x);
        let f = self.factor.sample(rng)?.dot(&xv);
        let m = self.model.sample(rng)?.dot(&xv);
        Ok((f, m))
    }

    /// Thompson step; ties go to the factor arm.
    pub fn choose<R: Rng + ?Sized>(&self, x: &StateVector, rng: &mut R) -> Result<Action> {
        let (f, m) = self.sample_rewards(x, rng)?;
        Ok(if m > f { Action::Model } else { Action::Factor })
    }

    /// Conjugate update of the chosen arm with observation `(x, r)`.
    pub fn update(&mut self, action: Action, x: &StateVector, r: f64) -> Result<()> {
        if x.iter().any(|v| !v.is_finite()) || !r.is_finite() {
            return Err(BanditError::InvalidParameter("update inputs must be finite".into()));
        }
        if x.iter().all(|v| *v == 0.0) {
            // zero context carries no information whatever the reward
            return Ok(());
        }
        let s2 = self.sigma * self.sigma;
        let xv = Vec8::from_column_slice(x);
        let arm = self.arm_mut(action);
        let target = arm.precision * arm.mu + xv * (r / s2);
        let mut p_new = arm.precision + xv * xv.transpose() / s2;
        p_new = (p_new + p_new.transpose()) * 0.5;
        let chol = Cholesky::new(p_new)
            .ok_or_else(|| BanditError::NumericalError("updated precision is not positive definite".into()))?;
        arm.mu = chol.solve(&target);
        arm.precision = p_new;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("finite state serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

/// How the observed reward is formed from experiment metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    /// Improvement over the incumbent of the chosen side.
    #[default]
    Delta,
    /// Weighted score of the new experiment alone.
    Absolute,
}

/// Action-selection policy used by the research loop.
pub trait Scheduler: Send {
    fn name(&self) -> &'static str;

    fn choose(&mut self, x: &StateVector, rng: &mut dyn rand::RngCore) -> Result<Action>;

    fn observe(&mut self, action: Action, x: &StateVector, reward: f64) -> Result<()>;

    /// Serializable state for resuming a run.
    fn snapshot(&self) -> serde_json::Value {
        serde_json::Value::Null
    }

    fn restore(&mut self, _state: &serde_json::Value) -> Result<()> {
        Ok(())
    }
}

pub struct BanditScheduler {
    pub state: BanditState,
}

impl BanditScheduler {
    pub fn new(state: BanditState) -> Self {
        Self { state }
    }
}

impl Scheduler for BanditScheduler {
    fn name(&self) -> &'static str {
        "bandit"
    }

    fn choose(&mut self, x: &StateVector, rng: &mut dyn rand::RngCore) -> Result<Action> {
        self.state.choose(x, rng)
    }

    fn observe(&mut self, action: Action, x: &StateVector, reward: f64) -> Result<()> {
        self.state.update(action, x, reward)
    }

    fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(&self.state).expect("finite state serializes")
    }

    fn restore(&mut self, state: &serde_json::Value) -> Result<()> {
        self.state = serde_json::from_value(state.clone())
            .map_err(|e| BanditError::InvalidParameter(format!("bad bandit snapshot: {e}")))?;
        Ok(())
    }
}

/// Fair coin between the two arms.
#[derive(Debug, Default)]
pub struct RandomScheduler;

impl Scheduler for RandomScheduler {
    fn name(&self) -> &'static str {
        "random"
    }

    fn choose(&mut self, _x: &StateVector, rng: &mut dyn rand::RngCore) -> Result<Action> {
        Ok(if rng.random_bool(0.5) { Action::Factor } else { Action::Model })
    }

    fn observe(&mut self, _action: Action, _x: &StateVector, _reward: f64) -> Result<()> {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn e1() -> StateVector {
        let mut x = [0.0; STATE_DIM];
        x[0] = 1.0;
        x
    }

    #[test]
    fn prior_precision() {
        let s = BanditState::init(2.0, 1.0, UNIFORM_WEIGHTS).unwrap();
        assert_eq!(s.factor.precision, Mat8::identity() * 0.25);
        assert!(BanditState::init(1.0, 0.0, UNIFORM_WEIGHTS).is_err());
        assert!(BanditState::init(-1.0, 1.0, UNIFORM_WEIGHTS).is_err());
    }

    #[test]
    fn single_and_double_update() {
        let mut s = BanditState::init(1.0, 1.0, UNIFORM_WEIGHTS).unwrap();
        s.update(Action::Factor, &e1(), 1.0).unwrap();
        assert_eq!(s.factor.precision[(0, 0)], 2.0);
        assert_eq!(s.factor.precision[(1, 1)], 1.0);
        assert!((s.factor.mu[0] - 0.5).abs() < 1e-15);
        assert_eq!(s.model, ArmPosterior::prior(1.0));
        s.update(Action::Factor, &e1(), 1.0).unwrap();
        assert!((s.factor.mu[0] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_update_is_identity() {
        let mut s = BanditState::init(1.0, 1.0, UNIFORM_WEIGHTS).unwrap();
        s.update(Action::Factor, &e1(), 0.7).unwrap();
        let before = s.clone();
        s.update(Action::Factor, &[0.0; STATE_DIM], 0.0).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn zero_context_ties_to_factor() {
        let s = BanditState::init(1.0, 1.0, UNIFORM_WEIGHTS).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            assert_eq!(s.choose(&[0.0; STATE_DIM], &mut rng).unwrap(), Action::Factor);
        }
    }

    #[test]
    fn reward_examples() {
        let base = MetricsBundle {
            ic: 0.03,
            icir: 0.2,
            rank_ic: 0.04,
            rank_icir: 0.3,
            arr: 0.1,
            ir: 1.0,
            mdd: -0.05,
            calmar: 2.0,
        };
        assert_eq!(reward_from_metrics(&base, &base, &UNIFORM_WEIGHTS), 0.0);
        let better = MetricsBundle { arr: 0.11, ..base };
        assert!((reward_from_metrics(&better, &base, &UNIFORM_WEIGHTS) - 0.00125).abs() < 1e-12);
        let worse = MetricsBundle { mdd: -0.10, ..base };
        assert!((reward_from_metrics(&worse, &base, &UNIFORM_WEIGHTS) + 0.00625).abs() < 1e-12);
        let nan = MetricsBundle::nan();
        assert_eq!(state_vector(&nan), [0.0; STATE_DIM]);
    }

    #[test]
    fn json_round_trip() {
        let mut s = BanditState::init(1.0, 0.5, UNIFORM_WEIGHTS).unwrap();
        s.update(Action::Model, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8], 0.3).unwrap();
        let back = BanditState::from_json(&s.to_json()).unwrap();
        assert_eq!(back, s);
    }
}
