//! Run directory layout: `state.json`, `trajectory.jsonl` (one record per
//! loop) and `kb.jsonl`. Files are replaced atomically after every loop.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bandit::Scheduler;
use crate::costeer::KnowledgeBase;
use crate::dsl::parse;
use crate::metrics::MetricsBundle;
use crate::panel::PanelTensor;
use crate::predictor::ModelSpec;
use crate::validation::{FactorLibrary, LibraryEntry};

use super::{ExperimentRecord, FactorSota, LoopConfig, ModelSota, ResearchError, Result, SotaSets};

pub const STATE_FILE: &str = "state.json";
pub const TRAJECTORY_FILE: &str = "trajectory.jsonl";
pub const KB_FILE: &str = "kb.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredFactor {
    pub name: String,
    pub formula: String,
    pub provenance: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredFactorSota {
    pub library: Vec<StoredFactor>,
    pub spec: ModelSpec,
    pub metrics: MetricsBundle,
    pub members: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFile {
    pub seed: u64,
    pub next_loop: usize,
    pub scheduler_name: String,
    pub scheduler: serde_json::Value,
    pub baseline: MetricsBundle,
    pub factor: StoredFactorSota,
    pub model: ModelSota,
}

pub struct RunStore {
    dir: PathBuf,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ResearchError {
    ResearchError::Persistence(format!("{}: {e}", path.display()))
}

impl RunStore {
    pub fn new(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    fn write_atomic(&self, file: &str, bytes: &[u8]) -> Result<()> {
        let target = self.path(file);
        let tmp = self.path(&format!("{file}.tmp"));
        let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
        f.sync_all().map_err(|e| io_err(&tmp, e))?;
        fs::rename(&tmp, &target).map_err(|e| io_err(&target, e))
    }

    pub fn save(&self, cfg: &LoopConfig, sota: &SotaSets, kb: &KnowledgeBase, scheduler: &dyn Scheduler) -> Result<()> {
        let mut traj = Vec::new();
        for r in &sota.history {
            serde_json::to_writer(&mut traj, r).map_err(|e| ResearchError::Persistence(e.to_string()))?;
            traj.push(b'\n');
        }
        self.write_atomic(TRAJECTORY_FILE, &traj)?;

        let mut kb_bytes = Vec::new();
        kb.write_jsonl(&mut kb_bytes).map_err(|e| ResearchError::Persistence(e.to_string()))?;
        self.write_atomic(KB_FILE, &kb_bytes)?;

        let state = StateFile {
            seed: cfg.seed,
            next_loop: sota.history.len(),
            scheduler_name: scheduler.name().to_string(),
            scheduler: scheduler.snapshot(),
            baseline: sota.baseline,
            factor: StoredFactorSota {
                library: sota
                    .factor
                    .library
                    .entries
                    .iter()
                    .map(|e| StoredFactor {
                        name: e.name.clone(),
                        formula: e.expr.to_string(),
                        provenance: e.provenance,
                    })
                    .collect(),
                spec: sota.factor.spec.clone(),
                metrics: sota.factor.metrics,
                members: sota.factor.members.clone(),
            },
            model: sota.model.clone(),
        };
        let text = serde_json::to_vec_pretty(&state).map_err(|e| ResearchError::Persistence(e.to_string()))?;
        self.write_atomic(STATE_FILE, &text)
    }

    /// Stored state, SOTA sets (with factor values recomputed on `panel`) and
    /// knowledge base, or `None` when the directory holds no run.
    pub fn load(&self, panel: &PanelTensor) -> Result<Option<(StateFile, SotaSets, KnowledgeBase)>> {
        let state_path = self.path(STATE_FILE);
        if !state_path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&state_path).map_err(|e| io_err(&state_path, e))?;
        let state: StateFile = serde_json::from_str(&text).map_err(|e| io_err(&state_path, e))?;

        let traj_path = self.path(TRAJECTORY_FILE);
        let traj = fs::read_to_string(&traj_path).unwrap_or_default();
        let mut history = Vec::new();
        for line in traj.lines().filter(|l| !l.trim().is_empty()).take(state.next_loop) {
            let r: ExperimentRecord = serde_json::from_str(line).map_err(|e| io_err(&traj_path, e))?;
            history.push(r);
        }
        if history.len() != state.next_loop {
            return Err(ResearchError::Persistence(format!(
                "trajectory holds {} records, state expects {}",
                history.len(),
                state.next_loop
            )));
        }

        let kb_path = self.path(KB_FILE);
        let kb = match fs::read_to_string(&kb_path) {
            Ok(t) => KnowledgeBase::read_jsonl(&t).map_err(|e| io_err(&kb_path, e))?,
            Err(_) => KnowledgeBase::new(),
        };

        let mut library = FactorLibrary::default();
        for f in &state.factor.library {
            let expr = parse(&f.formula).map_err(|e| io_err(&state_path, format!("{}: {e}", f.name)))?;
            let values = crate::dsl::evaluate(&expr, panel).map_err(|e| io_err(&state_path, format!("{}: {e}", f.name)))?;
            library
                .push(LibraryEntry {
                    name: f.name.clone(),
                    expr,
                    values,
                    provenance: f.provenance,
                })
                .map_err(|e| io_err(&state_path, e))?;
        }
        let sota = SotaSets {
            factor: FactorSota {
                library,
                spec: state.factor.spec.clone(),
                metrics: state.factor.metrics,
                members: state.factor.members.clone(),
            },
            model: state.model.clone(),
            baseline: state.baseline,
            history,
        };
        Ok(Some((state, sota, kb)))
    }
}
