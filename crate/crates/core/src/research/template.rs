//! Deterministic offline plug-ins: a template hypothesis generator and an
//! implementer that replays the hypothesis formulations.

use std::collections::BTreeMap;

use crate::bandit::Action;
use crate::costeer::{AttemptContext, Implementer, Result as CosteerResult, TaskKind};
use crate::predictor::{FeatureTransform, ModelSpec};

use super::{GenerationContext, Hypothesis, HypothesisGenerator, ResearchError, TaskSpec};

pub const WINDOWS: [usize; 5] = [5, 10, 20, 30, 60];

/// Factor families explored by the template generator, in switching order.
pub const FAMILIES: [&str; 3] = ["momentum", "volatility", "volume_corr"];

fn base(family: &str, w: usize) -> String {
    match family {
        "momentum" => format!("$close/Ref($close, {w}) - 1"),
        "volatility" => format!("Std($close/Ref($close, 1) - 1, {w})"),
        _ => format!("Corr($close/Ref($close, 1), Log($volume + 1), {w})"),
    }
}

fn scaled(family: &str, w: usize) -> String {
    match family {
        "momentum" => format!("({})/(Std($close/Ref($close, 1) - 1, {w}) + 1e-12)", base(family, w)),
        "volatility" => format!("({})/(Mean($high/$low - 1, {w}) + 1e-12)", base(family, w)),
        _ => format!("Corr($close/Ref($close, 1) - 1, Log($volume/Mean($volume, {w}) + 1), {w})"),
    }
}

/// Formula of `family` at composition `level` and window `w`. Each level
/// strictly deepens the expression tree of the previous one.
pub fn family_formula(family: &str, level: usize, w: usize) -> String {
    match level {
        0 => base(family, w),
        1 => scaled(family, w),
        2 => format!("Mean({}, 3)", scaled(family, w)),
        _ => format!("Less(Greater({}, -5), 5)", family_formula(family, level - 1, w)),
    }
}

fn next_family(family: &str) -> &'static str {
    let k = FAMILIES.iter().position(|f| *f == family).unwrap_or(0);
    FAMILIES[(k + 1) % FAMILIES.len()]
}

fn short(family: &str) -> &'static str {
    match family {
        "momentum" => "MOM",
        "volatility" => "VOL",
        _ => "VCORR",
    }
}

/// Model-side mutations tried in turn, applied to the current best spec.
fn mutate_spec(base: &ModelSpec, k: usize) -> ModelSpec {
    let mut s = base.clone();
    match k % 4 {
        0 => s.lookback = (s.lookback + 1).min(5),
        1 => {
            s.transform = match s.transform {
                FeatureTransform::Zscore => FeatureTransform::None,
                FeatureTransform::None => FeatureTransform::Zscore,
            }
        }
        2 => s.ridge_grid = vec![1e-2, 1.0, 10.0, 100.0],
        _ => s.lookback = s.lookback.saturating_sub(1),
    }
    s
}

/// Refine-or-switch template generator.
///
/// Its state is recomputed from the conditioned history on every call: the
/// last factor experiment decides whether to deepen the same family (after a
/// SOTA selection) or move to the next family, and the number of earlier
/// visits to a family rotates the windows it uses.
#[derive(Debug, Clone)]
pub struct TemplateGenerator {
    pub tasks_per_hypothesis: usize,
}

impl Default for TemplateGenerator {
    fn default() -> Self {
        Self {
            tasks_per_hypothesis: 2,
        }
    }
}

impl TemplateGenerator {
    /// `(family, level)` the next factor hypothesis should use.
    pub fn plan(ctx: &GenerationContext<'_>) -> (&'static str, usize) {
        let factor_records: Vec<_> = ctx
            .history
            .iter()
            .filter(|r| r.action == Action::Factor && r.hypothesis.family.is_some())
            .collect();
        let Some(last) = factor_records.last() else {
            return (FAMILIES[0], 0);
        };
        let fam = last.hypothesis.family.as_deref().unwrap_or(FAMILIES[0]);
        let fam = FAMILIES.iter().copied().find(|f| *f == fam).unwrap_or(FAMILIES[0]);
        if last.decision() {
            (fam, last.hypothesis.level.unwrap_or(0) + 1)
        } else {
            let next = next_family(fam);
            let successes = factor_records
                .iter()
                .filter(|r| r.hypothesis.family.as_deref() == Some(next) && r.decision())
                .count();
            (next, successes)
        }
    }

    fn factor_hypothesis(&self, ctx: &GenerationContext<'_>) -> Hypothesis {
        let (family, level) = Self::plan(ctx);
        let visits = ctx
            .history
            .iter()
            .filter(|r| r.hypothesis.family.as_deref() == Some(family))
            .count();
        let n_tasks = self.tasks_per_hypothesis.clamp(1, 5);
        let tasks = (0..n_tasks)
            .map(|j| {
                let w = WINDOWS[(visits * n_tasks + j) % WINDOWS.len()];
                TaskSpec {
                    name: format!("{}{w}_L{level}", short(family)),
                    description: format!("{} factor, composition level {level}, window {w} days", family.replace('_', " ")),
                    formulation: Some(family_formula(family, level, w)),
                }
            })
            .collect();
        let shift = if level == 0 && visits > 0 { "switch" } else { "refine" };
        Hypothesis {
            id: ctx.loop_index,
            action: Action::Factor,
            statement: format!("{} signals at composition level {level} add predictive power", family.replace('_', " ")),
            rationale: format!("template policy: {shift} within the {family} family"),
            tasks,
            family: Some(family.to_string()),
            level: Some(level),
        }
    }

    fn model_hypothesis(&self, ctx: &GenerationContext<'_>) -> Hypothesis {
        let tried = ctx.history.iter().filter(|r| r.action == Action::Model).count();
        let spec = mutate_spec(ctx.model_spec, tried);
        Hypothesis {
            id: ctx.loop_index,
            action: Action::Model,
            statement: format!("predictor variant {} improves the backtest", spec.describe()),
            rationale: "template policy: cycle through predictor mutations".into(),
            tasks: vec![TaskSpec {
                name: format!("model_{}", ctx.loop_index),
                description: format!("model spec {}", spec.describe()),
                formulation: Some(serde_json::to_string(&spec).expect("spec serializes")),
            }],
            family: None,
            level: None,
        }
    }
}

impl HypothesisGenerator for TemplateGenerator {
    fn name(&self) -> &'static str {
        "template"
    }

    fn generate(&mut self, ctx: &GenerationContext<'_>) -> Result<Hypothesis, ResearchError> {
        Ok(match ctx.action {
            Action::Factor => self.factor_hypothesis(ctx),
            Action::Model => self.model_hypothesis(ctx),
        })
    }

    fn direction(&self, hypothesis: &Hypothesis, decision: bool) -> String {
        match (&hypothesis.family, decision) {
            (Some(f), true) => format!("deepen the {f} family"),
            (Some(f), false) => format!("switch from {f} to {}", next_family(f)),
            (None, true) => "keep mutating the new predictor".into(),
            (None, false) => "try the next predictor mutation".into(),
        }
    }
}

/// Emits the task's proposed formulation, falling back to the closest
/// successful knowledge-base artifact after a failed attempt.
#[derive(Debug, Default)]
pub struct TemplateImplementer {
    pub calls: BTreeMap<String, usize>,
}

impl Implementer for TemplateImplementer {
    fn implement(&mut self, ctx: &AttemptContext<'_>) -> CosteerResult<String> {
        *self.calls.entry(ctx.task.id.clone()).or_default() += 1;
        let hint = ctx.task.hint.clone();
        let fallback = match ctx.task.kind {
            TaskKind::Factor => "$close/Ref($close, 5) - 1".to_string(),
            TaskKind::Model => serde_json::to_string(&ModelSpec::default()).expect("spec serializes"),
        };
        if ctx.attempt > 1 {
            if let Some(r) = ctx.reference {
                return Ok(r.artifact.clone());
            }
        }
        Ok(hint.unwrap_or(fallback))
    }
}
