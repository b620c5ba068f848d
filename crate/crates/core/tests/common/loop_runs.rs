//! Seeded research-loop runs with the template plugins.

use std::fs;
use std::path::Path;

use alphaloop::bandit::{weighted_score, BanditScheduler, BanditState, RandomScheduler, Scheduler, UNIFORM_WEIGHTS};
use alphaloop::panel::gen_synthetic;
use alphaloop::research::template::{TemplateGenerator, TemplateImplementer};
use alphaloop::research::{run_loop, LoopConfig, LoopOutcome, Plugins, ResearchData};
use alphaloop::research::store::{KB_FILE, STATE_FILE, TRAJECTORY_FILE};

pub fn synthetic_data(n: usize, t_len: usize, seed: u64, signal: f64) -> ResearchData {
    let panel = gen_synthetic(n, t_len, seed, signal).unwrap();
    ResearchData::prepare(panel, &LoopConfig::default().pipeline, 0.6, 0.2).unwrap()
}

pub fn bandit() -> BanditScheduler {
    BanditScheduler::new(BanditState::init(1.0, 0.1, UNIFORM_WEIGHTS).unwrap())
}

pub fn run_with(cfg: &LoopConfig, data: &ResearchData, scheduler: &mut dyn Scheduler) -> LoopOutcome {
    let mut generator = TemplateGenerator::default();
    let mut implementer = TemplateImplementer::default();
    run_loop(
        cfg,
        data,
        Plugins {
            generator: &mut generator,
            implementer: &mut implementer,
            scheduler,
        },
    )
    .unwrap()
}

pub fn run_bandit(cfg: &LoopConfig, data: &ResearchData) -> LoopOutcome {
    run_with(cfg, data, &mut bandit())
}

pub fn run_random(cfg: &LoopConfig, data: &ResearchData) -> LoopOutcome {
    run_with(cfg, data, &mut RandomScheduler)
}

/// Better of the two SOTA sides under the run's weights.
pub fn final_score(out: &LoopOutcome, cfg: &LoopConfig) -> f64 {
    weighted_score(&out.sota.factor.metrics, &cfg.weights).max(weighted_score(&out.sota.model.metrics, &cfg.weights))
}

/// Contents of the three persisted files.
pub fn stored_files(dir: &Path) -> [Vec<u8>; 3] {
    [TRAJECTORY_FILE, STATE_FILE, KB_FILE].map(|f| fs::read(dir.join(f)).unwrap())
}

/// Runs `total` loops in one go and again split at `stop`, returning whether
/// the persisted files agree byte for byte.
pub fn resume_matches(data: &ResearchData, seed: u64, stop: usize, total: usize, full: &[Vec<u8>; 3]) -> bool {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = LoopConfig {
        seed,
        max_loops: stop,
        out_dir: Some(dir.path().to_path_buf()),
        ..LoopConfig::default()
    };
    run_bandit(&cfg, data);
    cfg.max_loops = total;
    cfg.resume = true;
    run_bandit(&cfg, data);
    &stored_files(dir.path()) == full
}

pub fn uninterrupted(data: &ResearchData, seed: u64, total: usize) -> (LoopOutcome, [Vec<u8>; 3]) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = LoopConfig {
        seed,
        max_loops: total,
        out_dir: Some(dir.path().to_path_buf()),
        ..LoopConfig::default()
    };
    let out = run_bandit(&cfg, data);
    (out, stored_files(dir.path()))
}
