use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use alphaloop::bandit::{BanditScheduler, BanditState, RandomScheduler, Scheduler, state_vector, STATE_CHANNELS};
use alphaloop::dsl::{alpha20_library, library_from_json, library_to_json};
use alphaloop::metrics::{ic_by_year, MetricsBundle};
use alphaloop::panel::{gen_synthetic, gen_synthetic_with_signal, load_panel, write_panel, DATE_FORMAT};
use alphaloop::predictor::{LinearModel, ModelSpec};
use alphaloop::research::template::{TemplateGenerator, TemplateImplementer};
use alphaloop::costeer::Implementer;
use alphaloop::research::{run_loop, HypothesisGenerator, Plugins, ResearchData};
use alphaloop::validation::{evaluate_experiment, evaluate_model, EvalContext, ExperimentResult, FactorLibrary};
use alphaloop::Action;
use alphaloop_gateway::{Gateway, GatewayGenerator, GatewayImplementer, LlmScheduler};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{self, FileConfig};
use crate::{BacktestArgs, GenDataArgs, GeneratorKind, RunLoopArgs, SchedulerKind, UsageError};

/// Fitted predictor plus the spec that prepares its features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub spec: ModelSpec,
    pub model: LinearModel,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let synth = gen_synthetic_with_signal(args.instruments, args.dates, args.seed, args.signal)?;
    write_panel(&synth.panel, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    let sidecar = planted_path(&args.out);
    let mut w = create(&sidecar)?;
    writeln!(w, "datetime,instrument,planted_score")?;
    let s = &synth.planted_score;
    for (t, d) in s.dates.iter().enumerate() {
        for (i, id) in s.instruments.iter().enumerate() {
            writeln!(w, "{},{id},{}", d.format(DATE_FORMAT), s.get(i, t))?;
        }
    }
    w.flush()?;
    println!(
        "wrote {} ({} instruments x {} dates) and {}",
        args.out.display(),
        args.instruments,
        args.dates,
        sidecar.display()
    );
    Ok(())
}

/// `data/panel.csv` -> `data/panel.planted.csv`.
pub fn planted_path(out: &Path) -> PathBuf {
    out.with_extension("planted.csv")
}

fn research_data(cfg: &FileConfig) -> Result<ResearchData> {
    let panel = match (&cfg.data.panel, &cfg.data.synthetic) {
        (Some(path), _) => load_panel(path, &[]).with_context(|| format!("loading {}", path.display()))?,
        (None, Some(s)) => gen_synthetic(s.instruments, s.dates, s.seed, s.signal)?,
        (None, None) => bail!(UsageError("no panel: pass --panel or set [data] panel / [data.synthetic]".into())),
    };
    Ok(ResearchData::prepare(panel, &cfg.run.pipeline, cfg.data.train_frac, cfg.data.valid_frac)?)
}

fn eval_context<'a>(data: &'a ResearchData, cfg: &FileConfig) -> EvalContext<'a> {
    EvalContext {
        panel: &data.panel,
        labels: &data.labels,
        split: data.split,
        strategy: cfg.run.strategy,
        pipeline: cfg.run.pipeline,
        risk_free: cfg.run.risk_free,
    }
}

fn print_metrics(label: &str, m: &MetricsBundle) {
    let values = state_vector(m);
    let cells: Vec<String> = STATE_CHANNELS.iter().zip(values).map(|(k, v)| format!("{k}={v:.4}")).collect();
    println!("{label:<9}{}", cells.join(" "));
}

pub fn run_loop_cmd(args: &RunLoopArgs) -> Result<()> {
    let mut cfg = config::load(args.config.as_deref())?;
    if let Some(p) = &args.panel {
        cfg.data.panel = Some(p.clone());
    }
    if let Some(s) = args.seed {
        cfg.run.seed = s;
    }
    if let Some(n) = args.max_loops {
        cfg.run.max_loops = n;
    }
    if let Some(o) = &args.out {
        cfg.run.out_dir = Some(o.clone());
    }
    cfg.run.resume |= args.resume;

    // The endpoint is checked before any data work so a bad setup fails fast.
    let needs_gateway = args.generator == GeneratorKind::Gateway || args.scheduler == SchedulerKind::Llm;
    let gateway = if needs_gateway {
        Some(Arc::new(Gateway::new(cfg.gateway.clone()).context("gateway config")?))
    } else {
        None
    };
    let data = research_data(&cfg)?;

    let (mut generator, mut implementer): (Box<dyn HypothesisGenerator>, Box<dyn Implementer>) = match args.generator {
        GeneratorKind::Template => (Box::new(TemplateGenerator::default()), Box::new(TemplateImplementer::default())),
        GeneratorKind::Gateway => {
            let g = gateway.clone().expect("gateway built");
            (Box::new(GatewayGenerator::new(g.clone())), Box::new(GatewayImplementer::new(g)))
        }
    };
    let mut scheduler: Box<dyn Scheduler> = match args.scheduler {
        SchedulerKind::Bandit => Box::new(BanditScheduler::new(BanditState::init(
            cfg.bandit.tau,
            cfg.bandit.sigma,
            cfg.run.weights,
        )?)),
        SchedulerKind::Random => Box::new(RandomScheduler),
        SchedulerKind::Llm => Box::new(LlmScheduler::new(gateway.clone().expect("gateway built"))),
    };

    let outcome = run_loop(
        &cfg.run,
        &data,
        Plugins {
            generator: generator.as_mut(),
            implementer: implementer.as_mut(),
            scheduler: scheduler.as_mut(),
        },
    )?;

    let sota = &outcome.sota;
    let c = outcome.counters;
    print_metrics("baseline", &sota.baseline);
    print_metrics("factor", &sota.factor.metrics);
    print_metrics("model", &sota.model.metrics);
    println!("TL={} VL={} SL={}", c.total, c.valid, c.sota_selections);
    if let Some(g) = &gateway {
        println!("gateway requests={} tokens={}", g.requests_sent(), g.tokens_used());
    }

    let Some(dir) = &cfg.run.out_dir else {
        return Ok(());
    };
    let specs = sota.factor.library.specs();
    fs::write(dir.join("library.json"), library_to_json(&specs))?;
    let refit = evaluate_experiment(
        &sota.factor.library.named_values(),
        &[],
        &sota.model.spec,
        Action::Model,
        &eval_context(&data, &cfg),
    )
    .context("refitting the model on the factor library")?;
    write_json(
        &dir.join("model.json"),
        &ModelFile {
            spec: sota.model.spec.clone(),
            model: refit.model.clone(),
        },
    )?;
    write_json(
        &dir.join("manifest.json"),
        &json!({
            "config": args.config,
            "seed": cfg.run.seed,
            "out_dir": dir,
            "generator": args.generator.as_str(),
            "scheduler": args.scheduler.as_str(),
            "settings": cfg,
        }),
    )?;
    write_json(
        &dir.join("summary.json"),
        &json!({
            "baseline": sota.baseline,
            "factor": sota.factor.metrics,
            "model": sota.model.metrics,
            "exported_model": refit.metrics,
            "counters": c,
            "library": specs.iter().map(|s| &s.name).collect::<Vec<_>>(),
        }),
    )?;
    Ok(())
}

fn load_factors(source: &str) -> Result<Vec<(String, alphaloop::dsl::Expr)>> {
    let exprs = if source == "alpha20" {
        alpha20_library()
    } else {
        let text = fs::read_to_string(source).with_context(|| format!("reading {source}"))?;
        library_from_json(&text).with_context(|| format!("parsing {source}"))?
    };
    if exprs.is_empty() {
        bail!(UsageError(format!("factor library {source} is empty")));
    }
    Ok(exprs)
}

pub fn backtest_cmd(args: &BacktestArgs) -> Result<()> {
    let strategy = config::load_strategy(args.strategy_config.as_deref())?;
    let exprs = load_factors(&args.factors)?;
    let mut cfg = FileConfig::default();
    cfg.run.strategy = strategy;
    cfg.data.panel = Some(args.panel.clone());
    cfg.data.train_frac = args.train_frac;
    cfg.data.valid_frac = args.valid_frac;
    let data = research_data(&cfg)?;
    let library = FactorLibrary::from_exprs(&data.panel, &exprs, None)?;
    let ctx = eval_context(&data, &cfg);

    let result: ExperimentResult = match &args.model {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let file: ModelFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            evaluate_model(&library.named_values(), &file.spec, file.model, &ctx)?
        }
        None => evaluate_experiment(&library.named_values(), &[], &ModelSpec::default(), Action::Model, &ctx)?,
    };
    let report = result.report.as_ref().context("backtest produced no report")?;

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let report_value: serde_json::Value = serde_json::from_str(&report.to_json())?;
    write_json(
        &args.out.join("report.json"),
        &json!({
            "metrics": result.metrics,
            "features": result.feature_names,
            "test": { "first": data.panel.dates()[data.split.test.first], "last": data.panel.dates()[data.split.test.last] },
            "report": report_value,
        }),
    )?;
    let mut w = create(&args.out.join("nav.csv"))?;
    report.write_nav_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&args.out.join("trades.csv"))?;
    report.write_trades_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&args.out.join("ic_by_year.csv"))?;
    writeln!(w, "year,days,ic,rank_ic")?;
    if let Some(daily) = &result.daily {
        for y in ic_by_year(daily) {
            writeln!(w, "{},{},{},{}", y.year, y.days, y.ic, y.rank_ic)?;
        }
    }
    w.flush()?;

    print_metrics("test", &result.metrics);
    println!("trades={} wrote {}", report.trades.len(), args.out.display());
    Ok(())
}
