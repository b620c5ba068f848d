//! Research-loop plugins backed by a [`Gateway`].

use std::sync::Arc;

use alphaloop::bandit::{Action, BanditError, Scheduler, StateVector, STATE_CHANNELS};
use alphaloop::costeer::{AttemptContext, CosteerError, Implementer, Result as CosteerResult, TaskKind};
use alphaloop::research::{ExperimentRecord, GenerationContext, Hypothesis, HypothesisGenerator, ResearchError};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::client::Message;
use crate::{schema, Gateway, GatewayError};

/// Records shown to the generator, most recent last.
const HISTORY_LIMIT: usize = 12;

fn fmt_metric(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.4}")
    } else {
        "n/a".into()
    }
}

fn describe_record(r: &ExperimentRecord) -> String {
    let mut line = format!("- round {} [{}] {}", r.loop_index, r.action, r.hypothesis.statement);
    for t in &r.tasks {
        let art = t.artifact.as_deref().unwrap_or("not implemented");
        line.push_str(&format!("\n    task {}: {art}", t.name));
    }
    match &r.result {
        Some(res) => {
            let m = &res.metrics;
            line.push_str(&format!(
                "\n    IC {} ICIR {} ARR {} IR {} MDD {}; kept {:?}",
                fmt_metric(m.ic),
                fmt_metric(m.icir),
                fmt_metric(m.arr),
                fmt_metric(m.ir),
                fmt_metric(m.mdd),
                r.kept_factors
            ));
        }
        None => line.push_str(&format!("\n    failed: {}", r.error.as_deref().unwrap_or("unknown"))),
    }
    line.push_str(&format!(
        "\n    {}; next: {}",
        if r.decision() { "became SOTA" } else { "not selected" },
        r.feedback.direction
    ));
    line
}

pub struct GatewayGenerator {
    gateway: Arc<Gateway>,
}

impl GatewayGenerator {
    pub fn new(gateway: Arc<Gateway>) -> Self {
        Self { gateway }
    }

    pub fn messages(&self, ctx: &GenerationContext<'_>) -> Vec<Message> {
        let p = self.gateway.prompts();
        let system = p.render(
            "hypothesis_system",
            &[
                ("background", ctx.scenario.background.clone()),
                ("fields", ctx.scenario.data_schema.join(", ")),
                ("grammar", ctx.scenario.artifact_grammar.clone()),
            ],
        );
        let library: Vec<String> = ctx.library.iter().map(|f| format!("- {}: {}", f.name, f.formula)).collect();
        let skip = ctx.history.len().saturating_sub(HISTORY_LIMIT);
        let history: Vec<String> = ctx.history.iter().skip(skip).map(|r| describe_record(r)).collect();
        let user = p.render(
            "hypothesis_user",
            &[
                ("action", ctx.action.to_string()),
                ("loop_index", ctx.loop_index.to_string()),
                ("library", library.join("\n")),
                ("model_spec", ctx.model_spec.describe()),
                ("history", if history.is_empty() { "none yet".into() } else { history.join("\n") }),
            ],
        );
        vec![Message::system(system), Message::user(user)]
    }
}

impl HypothesisGenerator for GatewayGenerator {
    fn name(&self) -> &'static str {
        "gateway"
    }

    fn generate(&mut self, ctx: &GenerationContext<'_>) -> Result<Hypothesis, ResearchError> {
        let (action, id) = (ctx.action, ctx.loop_index);
        self.gateway
            .structured(self.messages(ctx), |v| schema::hypothesis(v, action, id))
            .map_err(|e| ResearchError::GenerationFailed(e.to_string()))
    }
}

pub struct GatewayImplementer {
    gateway: Arc<Gateway>,
}

impl GatewayImplementer {
    pub fn new(gateway: Arc<Gateway>) -> Self {
        Self { gateway }
    }

    pub fn messages(&self, ctx: &AttemptContext<'_>, grammar: &str) -> Vec<Message> {
        let p = self.gateway.prompts();
        let none = || "none".to_string();
        let user = p.render(
            "implement_user",
            &[
                ("kind", match ctx.task.kind { TaskKind::Factor => "factor", TaskKind::Model => "model" }.to_string()),
                ("task", ctx.task.description.clone()),
                ("attempt", ctx.attempt.to_string()),
                ("hint", ctx.task.hint.clone().unwrap_or_else(none)),
                (
                    "reference",
                    ctx.reference
                        .map(|r| format!("{} -> {}", r.task_description, r.artifact))
                        .unwrap_or_else(none),
                ),
                ("last_artifact", ctx.last_artifact.map(str::to_string).unwrap_or_else(none)),
                ("feedback", ctx.last_feedback.map(|f| f.message.clone()).unwrap_or_else(none)),
            ],
        );
        vec![
            Message::system(p.render("implement_system", &[("grammar", grammar.to_string())])),
            Message::user(user),
        ]
    }
}

const GRAMMAR: &str = "formulas over $open, $high, $low, $close, $volume and derived fields using + - * /, \
                       numeric literals, Ref, Mean, Std, Sum, Corr, Rsquare, Resi (integer window last), \
                       Less, Greater, Abs, Log";

impl Implementer for GatewayImplementer {
    fn implement(&mut self, ctx: &AttemptContext<'_>) -> CosteerResult<String> {
        let kind: TaskKind = ctx.task.kind;
        match self.gateway.structured(self.messages(ctx, GRAMMAR), |v| schema::artifact(v, kind)) {
            Ok(a) => Ok(a),
            // the evaluator rejects it and the attempt counts as failed
            Err(GatewayError::MalformedReply { raw, .. }) => Ok(raw),
            Err(e) => Err(CosteerError::ImplementerUnavailable(e.to_string())),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct SchedulerMemory {
    recent: Vec<(Action, f64)>,
    fallbacks: usize,
}

/// Asks the endpoint which side to work on. Falls back to a fair coin on the
/// iteration's random stream when no usable answer arrives.
pub struct LlmScheduler {
    gateway: Arc<Gateway>,
    memory: SchedulerMemory,
}

impl LlmScheduler {
    pub fn new(gateway: Arc<Gateway>) -> Self {
        Self {
            gateway,
            memory: SchedulerMemory::default(),
        }
    }

    /// Choices that fell back to the coin.
    pub fn fallbacks(&self) -> usize {
        self.memory.fallbacks
    }

    fn messages(&self, x: &StateVector) -> Vec<Message> {
        let p = self.gateway.prompts();
        let state: Vec<String> = STATE_CHANNELS.iter().zip(x).map(|(k, v)| format!("{k}={}", fmt_metric(*v))).collect();
        let skip = self.memory.recent.len().saturating_sub(HISTORY_LIMIT);
        let recent: Vec<String> = self.memory.recent[skip..].iter().map(|(a, r)| format!("({a}, {})", fmt_metric(*r))).collect();
        vec![
            Message::system(p.render("schedule_system", &[("channels", STATE_CHANNELS.join(", "))])),
            Message::user(p.render(
                "schedule_user",
                &[
                    ("state", state.join(", ")),
                    ("recent", if recent.is_empty() { "none".into() } else { recent.join(" ") }),
                ],
            )),
        ]
    }
}

impl Scheduler for LlmScheduler {
    fn name(&self) -> &'static str {
        "llm"
    }

    fn choose(&mut self, x: &StateVector, rng: &mut dyn rand::RngCore) -> alphaloop::bandit::Result<Action> {
        match self.gateway.structured(self.messages(x), schema::action_field) {
            Ok(a) => Ok(a),
            Err(_) => {
                self.memory.fallbacks += 1;
                Ok(if rng.random_bool(0.5) { Action::Factor } else { Action::Model })
            }
        }
    }

    fn observe(&mut self, action: Action, _x: &StateVector, reward: f64) -> alphaloop::bandit::Result<()> {
        self.memory.recent.push((action, reward));
        Ok(())
    }

    fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(&self.memory).expect("memory serializes")
    }

    fn restore(&mut self, state: &serde_json::Value) -> alphaloop::bandit::Result<()> {
        self.memory = serde_json::from_value(state.clone())
            .map_err(|e| BanditError::InvalidParameter(format!("bad scheduler snapshot: {e}")))?;
        Ok(())
    }
}
