//! Complexity-aware task scheduling with a retrieval knowledge base.
//!
//! Tasks form a dependency DAG. Each outer round orders the unresolved tasks
//! topologically, simplest (lowest complexity) first, and runs them in turn.
//! A task that fails all of its inner attempts gets its complexity raised,
//! and the round restarts with a fresh ordering.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::io::Write;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CosteerError {
    #[error("dependency cycle: {}", .0.join(" -> "))]
    CycleDetected(Vec<String>),
    #[error("unknown task id {0}")]
    UnknownTask(String),
    #[error("duplicate task id {0}")]
    DuplicateTask(String),
    #[error("implementer unavailable: {0}")]
    ImplementerUnavailable(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = CosteerError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Factor,
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskNode {
    pub id: String,
    pub description: String,
    pub kind: TaskKind,
    pub complexity_alpha: f64,
    pub attempts: usize,
    /// Proposed formulation carried over from the hypothesis, if any.
    #[serde(default)]
    pub hint: Option<String>,
}

impl TaskNode {
    pub fn new(id: impl Into<String>, description: impl Into<String>, kind: TaskKind) -> Self {
        Self {
            id: id.into(),
            description: description.into(),
            kind,
            complexity_alpha: 1.0,
            attempts: 0,
            hint: None,
        }
    }

    pub fn with_hint(mut self, hint: impl Into<String>) -> Self {
        self.hint = Some(hint.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDag {
    pub nodes: Vec<TaskNode>,
    /// `(from, to)`: `from` must be resolved before `to` runs.
    pub edges: Vec<(usize, usize)>,
}

impl TaskDag {
    /// Builds a DAG, rejecting duplicate ids and cycles.
    pub fn new(nodes: Vec<TaskNode>, edges: Vec<(usize, usize)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for n in &nodes {
            if !seen.insert(n.id.as_str()) {
                return Err(CosteerError::DuplicateTask(n.id.clone()));
            }
        }
        for &(a, b) in &edges {
            for k in [a, b] {
                if k >= nodes.len() {
                    return Err(CosteerError::UnknownTask(format!("#{k}")));
                }
            }
        }
        let dag = Self { nodes, edges };
        if let Some(cycle) = dag.find_cycle() {
            return Err(CosteerError::CycleDetected(
                cycle.iter().map(|&k| dag.nodes[k].id.clone()).collect(),
            ));
        }
        Ok(dag)
    }

    /// Same as [`TaskDag::new`] with edges given by task id.
    pub fn from_ids(nodes: Vec<TaskNode>, edges: &[(&str, &str)]) -> Result<Self> {
        let index = |id: &str| {
            nodes
                .iter()
                .position(|n| n.id == id)
                .ok_or_else(|| CosteerError::UnknownTask(id.to_string()))
        };
        let idx = edges
            .iter()
            .map(|(a, b)| Ok((index(a)?, index(b)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(nodes, idx)
    }

    /// Derives edges from "builds on <id>" references in the descriptions.
    pub fn from_descriptions(nodes: Vec<TaskNode>) -> Result<Self> {
        let re = Regex::new(r"(?i)builds[- ]on:?\s+([A-Za-z0-9_]+)").expect("valid regex");
        let mut edges = Vec::new();
        for (to, n) in nodes.iter().enumerate() {
            for cap in re.captures_iter(&n.description) {
                if let Some(from) = nodes.iter().position(|m| m.id == cap[1]) {
                    if from != to && !edges.contains(&(from, to)) {
                        edges.push((from, to));
                    }
                }
            }
        }
        Self::new(nodes, edges)
    }

    pub fn independent(nodes: Vec<TaskNode>) -> Result<Self> {
        Self::new(nodes, Vec::new())
    }

    fn find_cycle(&self) -> Option<Vec<usize>> {
        let n = self.nodes.len();
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in &self.edges {
            adj[a].push(b);
        }
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut color = vec![0u8; n];
        let mut stack: Vec<usize> = Vec::new();
        fn visit(u: usize, adj: &[Vec<usize>], color: &mut [u8], stack: &mut Vec<usize>) -> Option<Vec<usize>> {
            color[u] = 1;
            stack.push(u);
            for &v in &adj[u] {
                if color[v] == 1 {
                    let start = stack.iter().position(|&k| k == v).expect("on stack");
                    let mut cycle = stack[start..].to_vec();
                    cycle.push(v);
                    return Some(cycle);
                }
                if color[v] == 0 {
                    if let Some(c) = visit(v, adj, color, stack) {
                        return Some(c);
                    }
                }
            }
            stack.pop();
            color[u] = 2;
            None
        }
        (0..n).find_map(|u| if color[u] == 0 { visit(u, &adj, &mut color, &mut stack) } else { None })
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// `alpha_from / alpha_to` for every edge.
    pub fn edge_weights(&self) -> Vec<((usize, usize), f64)> {
        self.edges
            .iter()
            .map(|&(a, b)| ((a, b), self.nodes[a].complexity_alpha / self.nodes[b].complexity_alpha))
            .collect()
    }

    pub fn predecessors(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter(move |e| e.1 == k).map(|e| e.0)
    }
}

/// Topological order of the tasks in `remaining`; among free tasks the lowest
/// complexity goes first, ties by id. Edges from tasks outside `remaining`
/// count as satisfied.
pub fn update_task_order(dag: &TaskDag, remaining: &BTreeSet<usize>) -> Vec<usize> {
    let mut indeg: BTreeMap<usize, usize> = remaining.iter().map(|&k| (k, 0)).collect();
    for &(a, b) in &dag.edges {
        if remaining.contains(&a) && remaining.contains(&b) {
            *indeg.get_mut(&b).expect("remaining") += 1;
        }
    }
    #[derive(PartialEq)]
    struct Key(f64, String, usize);
    impl Eq for Key {}
    impl PartialOrd for Key {
        fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(o))
        }
    }
    impl Ord for Key {
        fn cmp(&self, o: &Self) -> std::cmp::Ordering {
            self.0.total_cmp(&o.0).then_with(|| self.1.cmp(&o.1)).then(self.2.cmp(&o.2))
        }
    }
    let key = |k: usize| Reverse(Key(dag.nodes[k].complexity_alpha, dag.nodes[k].id.clone(), k));
    let mut heap: BinaryHeap<_> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&k, _)| key(k)).collect();
    let mut order = Vec::with_capacity(remaining.len());
    while let Some(Reverse(Key(_, _, u))) = heap.pop() {
        order.push(u);
        for &(a, b) in &dag.edges {
            if a == u && remaining.contains(&b) {
                let d = indeg.get_mut(&b).expect("remaining");
                *d -= 1;
                if *d == 0 {
                    heap.push(key(b));
                }
            }
        }
    }
    order
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptFeedback {
    pub success: bool,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbEntry {
    pub task_description: String,
    pub artifact: String,
    pub feedback: AttemptFeedback,
}

/// Lowercased alphanumeric tokens.
pub fn tokens(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(|s| s.to_lowercase())
        .collect()
}

/// Token-set Jaccard similarity; 0 when both sides are empty.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let (ta, tb) = (tokens(a), tokens(b));
    let union = ta.union(&tb).count();
    if union == 0 {
        return 0.0;
    }
    ta.intersection(&tb).count() as f64 / union as f64
}

pub type Similarity = fn(&str, &str) -> f64;

/// Append-only store of (task, artifact, feedback) triples.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    entries: Vec<KbEntry>,
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<KbEntry>) -> Self {
        Self { entries }
    }

    pub fn append(&mut self, entry: KbEntry) {
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[KbEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Most similar entry with similarity strictly above `threshold`; the most
    /// recent entry wins ties.
    pub fn retrieve(&self, description: &str, threshold: f64, sim: Similarity) -> Option<(&KbEntry, f64)> {
        let mut best: Option<(&KbEntry, f64)> = None;
        for e in &self.entries {
            let s = sim(description, &e.task_description);
            if s > threshold && best.is_none_or(|(_, b)| s >= b) {
                best = Some((e, s));
            }
        }
        best
    }

    /// Successful entries only, for use as references.
    pub fn retrieve_success(&self, description: &str, threshold: f64, sim: Similarity) -> Option<(&KbEntry, f64)> {
        let mut best: Option<(&KbEntry, f64)> = None;
        for e in self.entries.iter().filter(|e| e.feedback.success) {
            let s = sim(description, &e.task_description);
            if s > threshold && best.is_none_or(|(_, b)| s >= b) {
                best = Some((e, s));
            }
        }
        best
    }

    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut *w, e)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> serde_json::Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<serde_json::Result<Vec<_>>>()?;
        Ok(Self { entries })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoSteerConfig {
    pub delta: f64,
    pub sim_threshold: f64,
    pub max_inner_iters: usize,
    pub max_outer: usize,
}

impl Default for CoSteerConfig {
    fn default() -> Self {
        Self {
            delta: 0.5,
            sim_threshold: 0.3,
            max_inner_iters: 10,
            max_outer: 3,
        }
    }
}

impl CoSteerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta.is_nan() || self.delta <= 0.0 {
            return Err(CosteerError::InvalidConfig("delta must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.sim_threshold) {
            return Err(CosteerError::InvalidConfig("sim_threshold must lie in [0, 1]".into()));
        }
        if self.max_inner_iters == 0 || self.max_outer == 0 {
            return Err(CosteerError::InvalidConfig("iteration caps must be >= 1".into()));
        }
        Ok(())
    }
}

/// What an implementer sees on each attempt.
pub struct AttemptContext<'a> {
    pub task: &'a TaskNode,
    pub attempt: usize,
    /// Most similar earlier successful solution, if any.
    pub reference: Option<&'a KbEntry>,
    /// Evaluator feedback on the previous attempt of this task.
    pub last_feedback: Option<&'a AttemptFeedback>,
    pub last_artifact: Option<&'a str>,
}

/// Produces an artifact for a task.
pub trait Implementer {
    fn implement(&mut self, ctx: &AttemptContext<'_>) -> Result<String>;
}

/// Checks an artifact and explains the outcome.
pub trait Evaluator {
    fn check(&mut self, task: &TaskNode, artifact: &str) -> AttemptFeedback;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub artifact: String,
    pub feedback: AttemptFeedback,
    pub attempts: usize,
}

/// Up to `max_inner_iters` generate/check rounds; every attempt is recorded
/// in the knowledge base.
pub fn implement_task(
    task: &TaskNode,
    kb: &mut KnowledgeBase,
    implementer: &mut dyn Implementer,
    evaluator: &mut dyn Evaluator,
    cfg: &CoSteerConfig,
) -> Result<TaskOutcome> {
    implement_task_traced(task, kb, implementer, evaluator, cfg, &mut |_, _| {})
}

fn implement_task_traced(
    task: &TaskNode,
    kb: &mut KnowledgeBase,
    implementer: &mut dyn Implementer,
    evaluator: &mut dyn Evaluator,
    cfg: &CoSteerConfig,
    on_attempt: &mut dyn FnMut(usize, &AttemptFeedback),
) -> Result<TaskOutcome> {
    let mut last: Option<(String, AttemptFeedback)> = None;
    for attempt in 1..=cfg.max_inner_iters {
        let reference = kb
            .retrieve_success(&task.description, cfg.sim_threshold, jaccard)
            .map(|(e, _)| e.clone());
        let artifact = implementer.implement(&AttemptContext {
            task,
            attempt,
            reference: reference.as_ref(),
            last_feedback: last.as_ref().map(|(_, f)| f),
            last_artifact: last.as_ref().map(|(a, _)| a.as_str()),
        })?;
        let feedback = evaluator.check(task, &artifact);
        kb.append(KbEntry {
            task_description: task.description.clone(),
            artifact: artifact.clone(),
            feedback: feedback.clone(),
        });
        on_attempt(attempt, &feedback);
        if feedback.success {
            return Ok(TaskOutcome {
                artifact,
                feedback,
                attempts: attempt,
            });
        }
        last = Some((artifact, feedback));
    }
    let (artifact, feedback) = last.expect("at least one attempt");
    Ok(TaskOutcome {
        artifact,
        feedback,
        attempts: cfg.max_inner_iters,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub step: usize,
    pub task_id: String,
    pub attempt: usize,
    pub outcome: String,
    pub alpha_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosteerRun {
    /// Final outcome per task, in node order; `None` if never attempted.
    pub results: Vec<Option<TaskOutcome>>,
    pub trace: Vec<TraceEvent>,
    /// Every ordering computed, one per outer round.
    pub orders: Vec<Vec<usize>>,
    /// Tasks in the order they were resolved (succeeded or given up).
    pub resolution_order: Vec<usize>,
    pub failures: Vec<usize>,
    pub dag: TaskDag,
}

impl CosteerRun {
    pub fn succeeded(&self, k: usize) -> bool {
        self.results[k].as_ref().is_some_and(|o| o.feedback.success)
    }

    pub fn write_trace_jsonl<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for e in &self.trace {
            serde_json::to_writer(&mut *w, e)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Runs every task of `dag` to success or until it has failed `max_outer` rounds.
pub fn run(
    dag: &TaskDag,
    kb: &mut KnowledgeBase,
    implementer: &mut dyn Implementer,
    evaluator: &mut dyn Evaluator,
    cfg: &CoSteerConfig,
) -> Result<CosteerRun> {
    cfg.validate()?;
    let mut dag = dag.clone();
    let n = dag.nodes.len();
    let mut out = CosteerRun {
        results: vec![None; n],
        trace: Vec::new(),
        orders: Vec::new(),
        resolution_order: Vec::new(),
        failures: vec![0; n],
        dag: dag.clone(),
    };
    let mut remaining: BTreeSet<usize> = (0..n).collect();
    let mut step = 0usize;
    while !remaining.is_empty() {
        let order = update_task_order(&dag, &remaining);
        out.orders.push(order.clone());
        for j in order {
            let alpha = dag.nodes[j].complexity_alpha;
            let id = dag.nodes[j].id.clone();
            let mut events = Vec::new();
            let outcome = implement_task_traced(&dag.nodes[j], kb, implementer, evaluator, cfg, &mut |attempt, fb| {
                events.push((attempt, fb.success));
            })?;
            dag.nodes[j].attempts += outcome.attempts;
            let success = outcome.feedback.success;
            if !success {
                dag.nodes[j].complexity_alpha += cfg.delta;
                out.failures[j] += 1;
            }
            let last = events.len();
            for (attempt, ok) in events {
                step += 1;
                out.trace.push(TraceEvent {
                    step,
                    task_id: id.clone(),
                    attempt,
                    outcome: if ok { "success" } else { "failure" }.into(),
                    alpha_after: if attempt == last { dag.nodes[j].complexity_alpha } else { alpha },
                });
            }
            out.results[j] = Some(outcome);
            if success || out.failures[j] >= cfg.max_outer {
                remaining.remove(&j);
                out.resolution_order.push(j);
            }
            if !success {
                break;
            }
        }
    }
    out.dag = dag;
    Ok(out)
}
