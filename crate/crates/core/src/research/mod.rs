//! The research loop: choose an action, propose a hypothesis, implement it,
//! validate it against the incumbent, and feed the outcome back.
//!
//! One iteration runs
//!
//! 1. the scheduler picks factor or model work from the current metric state,
//! 2. the history is filtered to records relevant to that action,
//! 3. a generator proposes a hypothesis with concrete tasks,
//! 4. the task scheduler implements the tasks against an artifact checker,
//! 5. new factors are de-duplicated and the experiment is fitted and backtested,
//! 6. the result is compared with the incumbent of the chosen side, which is
//!    replaced on a strict improvement, and the scheduler observes the reward.
//!
//! Every record is persisted after its iteration so a run can be resumed.

pub mod store;
pub mod template;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backtest::StrategyConfig;
use crate::bandit::{
    reward_from_metrics, state_vector, weighted_score, Action, BanditError, RewardMode, Scheduler, StateVector,
    UNIFORM_WEIGHTS,
};
use crate::costeer::{
    self, AttemptFeedback, CoSteerConfig, CosteerError, Evaluator, Implementer, KnowledgeBase, TaskDag, TaskKind,
    TaskNode, TraceEvent,
};
use crate::dsl::{alpha20_library, evaluate, parse, FormulaSpec};
use crate::metrics::MetricsBundle;
use crate::panel::{compute_labels, FactorValues, LabelPanel, PanelError, PanelTensor, PipelineConfig};
use crate::predictor::{ModelSpec, PredictorError, SplitSpec};
use crate::validation::{
    dedup, evaluable, evaluate_experiment, DedupConfig, EvalContext, ExperimentResult, FactorLibrary, LibraryEntry,
    ValidationError,
};

pub use store::{RunStore, StateFile};

#[derive(Debug, Error)]
pub enum ResearchError {
    #[error("hypothesis generation failed: {0}")]
    GenerationFailed(String),
    #[error("invalid hypothesis: {0}")]
    InvalidHypothesis(String),
    #[error("baseline evaluation failed: {0}")]
    Baseline(#[source] ValidationError),
    #[error("scheduler: {0}")]
    Scheduler(#[from] BanditError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("persistence: {0}")]
    Persistence(String),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
}

pub type Result<T, E = ResearchError> = std::result::Result<T, E>;

/// Fixed description of the research problem handed to generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioContext {
    pub background: String,
    pub data_schema: Vec<String>,
    pub artifact_grammar: String,
    pub strategy: StrategyConfig,
}

impl ScenarioContext {
    pub fn for_panel(panel: &PanelTensor, strategy: StrategyConfig) -> Self {
        Self {
            background: "Daily cross-sectional equity panel. Goal: improve next-day return prediction and the \
                         top-k long-only backtest by adding factors or changing the predictor."
                .into(),
            data_schema: panel.fields().to_vec(),
            artifact_grammar: "Factors are formulas over $fields using + - * /, numeric literals and \
                               Ref, Mean, Std, Sum, Corr, Rsquare, Resi (windowed, integer window last), \
                               Less, Greater, Abs, Log. Model tasks emit a ModelSpec JSON object \
                               {transform: none|zscore, ridge_grid: [..], lookback: n}."
                .into(),
            strategy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub description: String,
    /// DSL formula for factor tasks, ModelSpec JSON for model tasks.
    pub formulation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub id: usize,
    pub action: Action,
    pub statement: String,
    pub rationale: String,
    pub tasks: Vec<TaskSpec>,
    /// Template family and composition level, when the generator tracks them.
    #[serde(default)]
    pub family: Option<String>,
    #[serde(default)]
    pub level: Option<usize>,
}

impl Hypothesis {
    pub fn validate(&self) -> Result<()> {
        let n = self.tasks.len();
        let ok = match self.action {
            Action::Factor => (1..=5).contains(&n),
            Action::Model => n == 1,
        };
        if !ok {
            return Err(ResearchError::InvalidHypothesis(format!(
                "{} hypothesis with {n} tasks",
                self.action
            )));
        }
        let names: BTreeSet<&str> = self.tasks.iter().map(|t| t.name.as_str()).collect();
        if names.len() != n {
            return Err(ResearchError::InvalidHypothesis("task names must be unique".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub observations: String,
    pub decision: bool,
    /// New minus incumbent state vector.
    pub deltas: StateVector,
    pub direction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub name: String,
    pub description: String,
    pub artifact: Option<String>,
    pub success: bool,
    pub attempts: usize,
    pub message: String,
}

/// One loop iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub loop_index: usize,
    pub action: Action,
    pub context: StateVector,
    pub hypothesis: Hypothesis,
    pub tasks: Vec<TaskRecord>,
    pub kept_factors: Vec<String>,
    pub result: Option<ExperimentResult>,
    pub feedback: Feedback,
    pub reward: f64,
    pub error: Option<String>,
    pub trace: Vec<TraceEvent>,
}

impl ExperimentRecord {
    pub fn decision(&self) -> bool {
        self.feedback.decision
    }

    pub fn is_valid(&self) -> bool {
        self.result.is_some()
    }
}

/// Factor side of the SOTA set: the best library and the spec it was scored with.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorSota {
    pub library: FactorLibrary,
    pub spec: ModelSpec,
    pub metrics: MetricsBundle,
    /// Records whose artifacts are inputs of the stored evaluation.
    pub members: BTreeSet<usize>,
}

/// Model side: the best spec and the library it was scored with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSota {
    pub spec: ModelSpec,
    pub library_names: Vec<String>,
    pub metrics: MetricsBundle,
    pub members: BTreeSet<usize>,
    /// Record that introduced `spec`; `None` for the default.
    pub source: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SotaSets {
    pub factor: FactorSota,
    pub model: ModelSota,
    pub baseline: MetricsBundle,
    pub history: Vec<ExperimentRecord>,
}

impl SotaSets {
    pub fn members(&self, action: Action) -> &BTreeSet<usize> {
        match action {
            Action::Factor => &self.factor.members,
            Action::Model => &self.model.members,
        }
    }

    pub fn incumbent(&self, action: Action) -> &MetricsBundle {
        match action {
            Action::Factor => &self.factor.metrics,
            Action::Model => &self.model.metrics,
        }
    }
}

/// Records whose action matches, or that are inputs of that action's SOTA,
/// in chronological order.
pub fn condition_history<'a>(
    history: &'a [ExperimentRecord],
    action: Action,
    sota: &SotaSets,
) -> Vec<&'a ExperimentRecord> {
    let members = sota.members(action);
    history
        .iter()
        .filter(|r| r.action == action || members.contains(&r.loop_index))
        .collect()
}

/// Compares a result with the incumbent of its side. The decision is a strict
/// improvement of the weighted score.
pub fn analyze(result: &ExperimentResult, sota: &SotaSets, w: &StateVector) -> Feedback {
    let incumbent = sota.incumbent(result.action);
    let (new, old) = (state_vector(&result.metrics), state_vector(incumbent));
    let mut deltas = [0.0; 8];
    for k in 0..8 {
        deltas[k] = new[k] - old[k];
    }
    let (s_new, s_old) = (weighted_score(&result.metrics, w), weighted_score(incumbent, w));
    let decision = s_new > s_old;
    let observations = format!(
        "IC {:.4} (was {:.4}), Rank IC {:.4} (was {:.4}), ARR {:.4} (was {:.4}), MDD {:.4} (was {:.4}); \
         weighted score {:.6} vs {:.6}",
        result.metrics.ic,
        incumbent.ic,
        result.metrics.rank_ic,
        incumbent.rank_ic,
        result.metrics.arr,
        incumbent.arr,
        result.metrics.mdd,
        incumbent.mdd,
        s_new,
        s_old
    );
    Feedback {
        observations,
        decision,
        deltas,
        direction: String::new(),
    }
}

/// Inputs a generator sees when proposing the next hypothesis.
pub struct GenerationContext<'a> {
    pub loop_index: usize,
    pub action: Action,
    pub scenario: &'a ScenarioContext,
    pub history: Vec<&'a ExperimentRecord>,
    pub model_spec: &'a ModelSpec,
    pub library: Vec<FormulaSpec>,
}

pub trait HypothesisGenerator {
    fn name(&self) -> &'static str;

    fn generate(&mut self, ctx: &GenerationContext<'_>) -> Result<Hypothesis>;

    /// Suggested next step after an experiment on `hypothesis`.
    fn direction(&self, _hypothesis: &Hypothesis, decision: bool) -> String {
        if decision {
            "build on this result".into()
        } else {
            "try a different direction".into()
        }
    }
}

/// Checks artifacts: factor formulas must parse, evaluate on the panel and
/// carry cross-sectional dispersion; model artifacts must be a valid spec.
pub struct ArtifactChecker<'a> {
    pub panel: &'a PanelTensor,
}

impl ArtifactChecker<'_> {
    pub fn factor_values(&self, artifact: &str) -> std::result::Result<FactorValues, String> {
        let expr = parse(artifact).map_err(|e| format!("parse: {e}"))?;
        let values = evaluate(&expr, self.panel).map_err(|e| format!("evaluate: {e}"))?;
        if !evaluable(&values) {
            return Err("no date has two finite values with dispersion".into());
        }
        Ok(values)
    }
}

pub fn parse_model_artifact(artifact: &str) -> std::result::Result<ModelSpec, String> {
    let spec: ModelSpec = serde_json::from_str(artifact).map_err(|e| format!("model spec json: {e}"))?;
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

impl Evaluator for ArtifactChecker<'_> {
    fn check(&mut self, task: &TaskNode, artifact: &str) -> AttemptFeedback {
        let outcome = match task.kind {
            TaskKind::Factor => self.factor_values(artifact).map(|_| ()),
            TaskKind::Model => parse_model_artifact(artifact).map(|_| ()),
        };
        match outcome {
            Ok(()) => AttemptFeedback {
                success: true,
                message: "ok".into(),
            },
            Err(message) => AttemptFeedback {
                success: false,
                message,
            },
        }
    }
}

/// Panel, labels and split shared by every experiment of a run.
#[derive(Debug, Clone)]
pub struct ResearchData {
    pub panel: PanelTensor,
    pub labels: LabelPanel,
    pub split: SplitSpec,
}

impl ResearchData {
    /// Labels the panel and splits the dates after the `window_ell` warm-up
    /// into train / valid / test blocks by fraction.
    pub fn prepare(panel: PanelTensor, pipeline: &PipelineConfig, train_frac: f64, valid_frac: f64) -> Result<Self> {
        let labels = compute_labels(&panel, pipeline)?;
        let split = SplitSpec::proportional(panel.n_dates(), pipeline.window_ell, train_frac, valid_frac)?;
        Ok(Self { panel, labels, split })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub seed: u64,
    pub max_loops: usize,
    pub max_wall_secs: Option<f64>,
    pub weights: StateVector,
    pub reward_mode: RewardMode,
    pub dedup: DedupConfig,
    pub costeer: CoSteerConfig,
    pub strategy: StrategyConfig,
    pub pipeline: PipelineConfig,
    pub risk_free: f64,
    pub out_dir: Option<PathBuf>,
    /// Continue from the state in `out_dir` when present.
    pub resume: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            max_loops: 20,
            max_wall_secs: None,
            weights: UNIFORM_WEIGHTS,
            reward_mode: RewardMode::Delta,
            dedup: DedupConfig::default(),
            costeer: CoSteerConfig::default(),
            strategy: StrategyConfig::default(),
            pipeline: PipelineConfig::default(),
            risk_free: 0.0,
            out_dir: None,
            resume: false,
        }
    }
}

pub struct Plugins<'a> {
    pub generator: &'a mut dyn HypothesisGenerator,
    pub implementer: &'a mut dyn Implementer,
    pub scheduler: &'a mut dyn Scheduler,
}

/// Total loops, loops with a completed experiment, and SOTA selections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub total: usize,
    pub valid: usize,
    pub sota_selections: usize,
}

impl Counters {
    pub fn from_history(history: &[ExperimentRecord]) -> Self {
        Self {
            total: history.len(),
            valid: history.iter().filter(|r| r.is_valid()).count(),
            sota_selections: history.iter().filter(|r| r.decision()).count(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoopOutcome {
    pub sota: SotaSets,
    pub counters: Counters,
    pub kb: KnowledgeBase,
}

/// Per-iteration random stream, independent of how the run was split across
/// resumptions.
pub fn iteration_rng(seed: u64, loop_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(loop_index as u64 + 1);
    rng
}

/// Evaluates the Alpha-20 library with the default spec.
pub fn baseline(data: &ResearchData, cfg: &LoopConfig) -> Result<(FactorLibrary, ExperimentResult)> {
    let library = FactorLibrary::from_exprs(&data.panel, &alpha20_library(), None).map_err(ResearchError::Baseline)?;
    let ctx = eval_context(data, cfg);
    let result = evaluate_experiment(
        &library.named_values(),
        &[],
        &ModelSpec::default(),
        Action::Factor,
        &ctx,
    )
    .map_err(ResearchError::Baseline)?;
    Ok((library, result))
}

fn eval_context<'a>(data: &'a ResearchData, cfg: &LoopConfig) -> EvalContext<'a> {
    EvalContext {
        panel: &data.panel,
        labels: &data.labels,
        split: data.split,
        strategy: cfg.strategy,
        pipeline: cfg.pipeline,
        risk_free: cfg.risk_free,
    }
}

fn unique_name(library: &FactorLibrary, taken: &BTreeSet<String>, name: &str) -> String {
    let free = |n: &str| !library.contains(n) && !taken.contains(n);
    if free(name) {
        return name.to_string();
    }
    (1..)
        .map(|k| format!("{name}__{k}"))
        .find(|n| free(n))
        .expect("unbounded search")
}

struct Attempt {
    tasks: Vec<TaskRecord>,
    trace: Vec<TraceEvent>,
    kept: Vec<String>,
    new_entries: Vec<LibraryEntry>,
    outcome: std::result::Result<(ExperimentResult, Option<ModelSpec>), String>,
}

#[allow(clippy::too_many_arguments)]
fn run_experiment(
    loop_index: usize,
    hypothesis: &Hypothesis,
    sota: &SotaSets,
    data: &ResearchData,
    cfg: &LoopConfig,
    kb: &mut KnowledgeBase,
    implementer: &mut dyn Implementer,
) -> Attempt {
    let mut attempt = Attempt {
        tasks: Vec::new(),
        trace: Vec::new(),
        kept: Vec::new(),
        new_entries: Vec::new(),
        outcome: Err(String::new()),
    };
    let kind = match hypothesis.action {
        Action::Factor => TaskKind::Factor,
        Action::Model => TaskKind::Model,
    };
    let nodes: Vec<TaskNode> = hypothesis
        .tasks
        .iter()
        .map(|t| {
            let node = TaskNode::new(t.name.clone(), t.description.clone(), kind);
            match &t.formulation {
                Some(f) => node.with_hint(f.clone()),
                None => node,
            }
        })
        .collect();
    let dag = match TaskDag::from_descriptions(nodes) {
        Ok(d) => d,
        Err(e) => {
            attempt.outcome = Err(format!("task graph: {e}"));
            return attempt;
        }
    };
    let mut checker = ArtifactChecker { panel: &data.panel };
    let run = match costeer::run(&dag, kb, implementer, &mut checker, &cfg.costeer) {
        Ok(r) => r,
        Err(e) => {
            attempt.outcome = Err(match e {
                CosteerError::ImplementerUnavailable(m) => format!("implementer unavailable: {m}"),
                other => other.to_string(),
            });
            return attempt;
        }
    };
    attempt.trace = run.trace.clone();
    for (k, t) in hypothesis.tasks.iter().enumerate() {
        let r = run.results[k].as_ref();
        attempt.tasks.push(TaskRecord {
            name: t.name.clone(),
            description: t.description.clone(),
            artifact: r.map(|o| o.artifact.clone()),
            success: run.succeeded(k),
            attempts: run.dag.nodes[k].attempts,
            message: r.map(|o| o.feedback.message.clone()).unwrap_or_default(),
        });
    }
    let ctx = eval_context(data, cfg);
    match hypothesis.action {
        Action::Factor => {
            let mut names = Vec::new();
            let mut exprs = Vec::new();
            let mut values = Vec::new();
            let mut taken = BTreeSet::new();
            for t in attempt.tasks.iter().filter(|t| t.success) {
                let artifact = t.artifact.as_deref().expect("successful task has an artifact");
                let Ok(expr) = parse(artifact) else { continue };
                let Ok(v) = checker.factor_values(artifact) else { continue };
                let name = unique_name(&sota.factor.library, &taken, &t.name);
                taken.insert(name.clone());
                names.push(name);
                exprs.push(expr);
                values.push(v);
            }
            if values.is_empty() {
                attempt.outcome = Err("no task was implemented".into());
                return attempt;
            }
            let kept_idx = match dedup(&sota.factor.library.values(), &values, &cfg.dedup) {
                Ok(k) => k,
                Err(e) => {
                    attempt.outcome = Err(e.to_string());
                    return attempt;
                }
            };
            if kept_idx.is_empty() {
                attempt.outcome = Err("every candidate was redundant with the library".into());
                return attempt;
            }
            let mut features = sota.factor.library.named_values();
            for &k in &kept_idx {
                attempt.kept.push(names[k].clone());
                features.push((names[k].clone(), values[k].clone()));
                attempt.new_entries.push(LibraryEntry {
                    name: names[k].clone(),
                    expr: exprs[k].clone(),
                    values: values[k].clone(),
                    provenance: Some(loop_index),
                });
            }
            attempt.outcome = evaluate_experiment(&features, &attempt.kept, &sota.model.spec, Action::Factor, &ctx)
                .map(|r| (r, None))
                .map_err(|e| e.to_string());
        }
        Action::Model => {
            let spec = attempt
                .tasks
                .iter()
                .find(|t| t.success)
                .and_then(|t| t.artifact.as_deref())
                .and_then(|a| parse_model_artifact(a).ok());
            let Some(spec) = spec else {
                attempt.outcome = Err("model task was not implemented".into());
                return attempt;
            };
            let features = sota.factor.library.named_values();
            attempt.outcome = evaluate_experiment(&features, &[], &spec, Action::Model, &ctx)
                .map(|r| (r, Some(spec)))
                .map_err(|e| e.to_string());
        }
    }
    attempt
}

/// State vector the scheduler conditions on: metrics of the latest completed
/// experiment, or the baseline before any.
fn current_context(sota: &SotaSets) -> StateVector {
    sota.history
        .iter()
        .rev()
        .find_map(|r| r.result.as_ref().map(|x| state_vector(&x.metrics)))
        .unwrap_or_else(|| state_vector(&sota.baseline))
}

fn failed_hypothesis(loop_index: usize, action: Action, why: &str) -> Hypothesis {
    Hypothesis {
        id: loop_index,
        action,
        statement: String::new(),
        rationale: why.to_string(),
        tasks: Vec::new(),
        family: None,
        level: None,
    }
}

/// Runs the loop until `max_loops` records exist or the wall-clock budget is
/// spent. With `resume` set and state present in `out_dir`, the run continues
/// where the stored one stopped.
pub fn run_loop(cfg: &LoopConfig, data: &ResearchData, plugins: Plugins<'_>) -> Result<LoopOutcome> {
    let Plugins {
        generator,
        implementer,
        scheduler,
    } = plugins;
    let started = Instant::now();
    let store = cfg.out_dir.as_ref().map(RunStore::new).transpose()?;
    let scenario = ScenarioContext::for_panel(&data.panel, cfg.strategy);

    let resumed = match (&store, cfg.resume) {
        (Some(s), true) => s.load(&data.panel)?,
        _ => None,
    };
    let (mut sota, mut kb) = match resumed {
        Some((state, sota, kb)) => {
            scheduler.restore(&state.scheduler)?;
            (sota, kb)
        }
        None => {
            let (library, base) = baseline(data, cfg)?;
            let sota = SotaSets {
                factor: FactorSota {
                    library: library.clone(),
                    spec: ModelSpec::default(),
                    metrics: base.metrics,
                    members: BTreeSet::new(),
                },
                model: ModelSota {
                    spec: ModelSpec::default(),
                    library_names: library.names(),
                    metrics: base.metrics,
                    members: BTreeSet::new(),
                    source: None,
                },
                baseline: base.metrics,
                history: Vec::new(),
            };
            if let Some(s) = &store {
                s.save(cfg, &sota, &KnowledgeBase::new(), scheduler)?;
            }
            (sota, KnowledgeBase::new())
        }
    };

    for loop_index in sota.history.len()..cfg.max_loops {
        if cfg.max_wall_secs.is_some_and(|b| started.elapsed().as_secs_f64() >= b) {
            break;
        }
        let mut rng = iteration_rng(cfg.seed, loop_index);
        let x = current_context(&sota);
        let action = scheduler.choose(&x, &mut rng)?;
        let incumbent = *sota.incumbent(action);

        let generated = {
            let gctx = GenerationContext {
                loop_index,
                action,
                scenario: &scenario,
                history: condition_history(&sota.history, action, &sota),
                model_spec: &sota.model.spec,
                library: sota.factor.library.specs(),
            };
            generator.generate(&gctx).and_then(|h| {
                h.validate()?;
                if h.action != action {
                    return Err(ResearchError::InvalidHypothesis(format!(
                        "asked for a {action} hypothesis, got {}",
                        h.action
                    )));
                }
                Ok(h)
            })
        };

        let mut record = match generated {
            Err(e) => ExperimentRecord {
                loop_index,
                action,
                context: x,
                hypothesis: failed_hypothesis(loop_index, action, &e.to_string()),
                tasks: Vec::new(),
                kept_factors: Vec::new(),
                result: None,
                feedback: Feedback {
                    observations: e.to_string(),
                    decision: false,
                    deltas: [0.0; 8],
                    direction: String::new(),
                },
                reward: 0.0,
                error: Some(e.to_string()),
                trace: Vec::new(),
            },
            Ok(hypothesis) => {
                let attempt = run_experiment(loop_index, &hypothesis, &sota, data, cfg, &mut kb, implementer);
                let (result, new_spec, feedback, error) = match attempt.outcome {
                    Ok((result, spec)) => {
                        let mut fb = analyze(&result, &sota, &cfg.weights);
                        fb.direction = generator.direction(&hypothesis, fb.decision);
                        (Some(result), spec, fb, None)
                    }
                    Err(msg) => {
                        let fb = Feedback {
                            observations: msg.clone(),
                            decision: false,
                            deltas: [0.0; 8],
                            direction: generator.direction(&hypothesis, false),
                        };
                        (None, None, fb, Some(msg))
                    }
                };
                if feedback.decision {
                    let res = result.as_ref().expect("decision implies a result");
                    match action {
                        Action::Factor => {
                            for e in attempt.new_entries {
                                sota.factor.library.push(e).expect("names were made unique");
                            }
                            sota.factor.spec = sota.model.spec.clone();
                            sota.factor.metrics = res.metrics;
                            let mut members: BTreeSet<usize> =
                                sota.factor.library.entries.iter().filter_map(|e| e.provenance).collect();
                            members.extend(sota.model.source);
                            sota.factor.members = members;
                        }
                        Action::Model => {
                            sota.model.spec = new_spec.expect("model results carry their spec");
                            sota.model.source = Some(loop_index);
                            sota.model.library_names = sota.factor.library.names();
                            sota.model.metrics = res.metrics;
                            let mut members: BTreeSet<usize> =
                                sota.factor.library.entries.iter().filter_map(|e| e.provenance).collect();
                            members.insert(loop_index);
                            sota.model.members = members;
                        }
                    }
                }
                ExperimentRecord {
                    loop_index,
                    action,
                    context: x,
                    hypothesis,
                    tasks: attempt.tasks,
                    kept_factors: attempt.kept,
                    result,
                    feedback,
                    reward: 0.0,
                    error,
                    trace: attempt.trace,
                }
            }
        };

        let new_metrics = record.result.as_ref().map(|r| r.metrics).unwrap_or_else(MetricsBundle::nan);
        record.reward = match cfg.reward_mode {
            RewardMode::Delta => reward_from_metrics(&new_metrics, &incumbent, &cfg.weights),
            RewardMode::Absolute => weighted_score(&new_metrics, &cfg.weights),
        };
        scheduler.observe(action, &x, record.reward)?;
        sota.history.push(record);
        if let Some(s) = &store {
            s.save(cfg, &sota, &kb, scheduler)?;
        }
    }

    let counters = Counters::from_history(&sota.history);
    Ok(LoopOutcome { sota, counters, kb })
}
