mod common;

use alphaloop::bandit::Action;
use alphaloop::metrics::factor_metrics;
use alphaloop::panel::{gen_synthetic_with_signal, FactorValues, PipelineConfig};
use alphaloop::predictor::ModelSpec;
use alphaloop::research::{LoopConfig, ResearchData};
use alphaloop::validation::{
    dedup, evaluate_experiment, mean_cross_corr, DedupConfig, EvalContext, FactorLibrary,
};
use alphaloop::dsl::alpha20_library;
use common::dedup_cases::{duplicates_dropped, noise, noise_kept, permutation_stable};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn exact_and_rescaled_duplicates_dropped() {
    for seed in 0..20 {
        assert!(duplicates_dropped(seed), "seed {seed}");
    }
}

#[test]
fn independent_noise_always_kept() {
    let kept = (0..100).filter(|&s| noise_kept(1000 + s)).count();
    assert_eq!(kept, 100);
}

#[test]
fn incumbent_order_does_not_matter() {
    for seed in 0..10 {
        assert!(permutation_stable(seed), "seed {seed}");
    }
}

#[test]
fn negation_kept_unless_absolute() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = noise(&mut rng);
    let mut neg = a.clone();
    neg.values.iter_mut().for_each(|v| *v = -*v);
    let cfg = DedupConfig::default();
    assert_eq!(dedup(&[&a], &[neg.clone()], &cfg).unwrap(), vec![0]);
    let abs = DedupConfig { abs_dedup: true, ..cfg };
    assert!(dedup(&[&a], &[neg], &abs).unwrap().is_empty());
}

fn research_data(seed: u64) -> (ResearchData, FactorValues) {
    let syn = gen_synthetic_with_signal(60, 400, seed, 0.6).unwrap();
    let data = ResearchData::prepare(syn.panel, &PipelineConfig::default(), 0.6, 0.2).unwrap();
    (data, syn.planted_score)
}

#[test]
fn planted_score_predicts_and_noise_does_not() {
    let (data, planted) = research_data(11);
    let test = data.split.test;
    let ic = factor_metrics(&planted, &data.labels.raw, test.first, test.last).unwrap().ic;
    assert!(ic > 0.2, "planted IC {ic}");
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut junk = planted.clone();
    junk.values.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    let ic = factor_metrics(&junk, &data.labels.raw, test.first, test.last).unwrap().ic;
    assert!(ic.abs() < 0.05, "noise IC {ic}");
}

fn alpha20(data: &ResearchData) -> FactorLibrary {
    FactorLibrary::from_exprs(&data.panel, &alpha20_library(), None).unwrap()
}

#[test]
fn test_labels_reach_metrics_but_not_the_model() {
    let (data, _) = research_data(5);
    let cfg = LoopConfig::default();
    let lib = alpha20(&data);
    let ctx = EvalContext {
        panel: &data.panel,
        labels: &data.labels,
        split: data.split,
        strategy: cfg.strategy,
        pipeline: cfg.pipeline,
        risk_free: 0.0,
    };
    let features = lib.named_values();
    let spec = ModelSpec::default();
    let base = evaluate_experiment(&features, &[], &spec, Action::Factor, &ctx).unwrap();

    let mut labels = data.labels.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for t in data.split.test.first..=data.split.test.last {
        for i in 0..labels.raw.n_instruments() {
            labels.raw.set(i, t, rng.random_range(-0.1..0.1));
            labels.normalized.set(i, t, rng.random_range(-2.0..2.0));
        }
    }
    let ctx2 = EvalContext { labels: &labels, ..ctx.clone() };
    let other = evaluate_experiment(&features, &[], &spec, Action::Factor, &ctx2).unwrap();
    assert_eq!(base.model, other.model);
    assert_eq!(base.valid_mse, other.valid_mse);
    assert_ne!(base.metrics.ic, other.metrics.ic);

    let again = evaluate_experiment(&features, &[], &spec, Action::Factor, &ctx).unwrap();
    assert!(base.metrics.bit_eq(&again.metrics));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn kept_candidates_are_mutually_distinct(seed in any::<u64>(), n in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base: Vec<FactorValues> = (0..3).map(|_| small_noise(&mut rng)).collect();
        // mixtures of a few base series, some nearly collinear
        let cands: Vec<FactorValues> = (0..n)
            .map(|_| {
                let w: Vec<f64> = (0..3).map(|_| if rng.random_bool(0.5) { rng.random_range(-1.0..1.0) } else { 0.0 }).collect();
                let mut out = base[0].clone();
                for (k, v) in out.values.iter_mut().enumerate() {
                    *v = (0..3).map(|j| w[j] * base[j].values[k]).sum::<f64>() + 1e-4 * rng.random_range(-1.0..1.0);
                }
                out
            })
            .collect();
        let cfg = DedupConfig::default();
        let kept = dedup(&[], &cands, &cfg).unwrap();
        for (x, &a) in kept.iter().enumerate() {
            for &b in &kept[..x] {
                let r = mean_cross_corr(&cands[a], &cands[b]).unwrap_or(f64::NEG_INFINITY);
                prop_assert!(r < cfg.threshold);
            }
        }
        // kept subset deduplicated again is unchanged
        let subset: Vec<FactorValues> = kept.iter().map(|&k| cands[k].clone()).collect();
        prop_assert_eq!(dedup(&[], &subset, &cfg).unwrap(), (0..subset.len()).collect::<Vec<_>>());
    }
}

fn small_noise(rng: &mut ChaCha8Rng) -> FactorValues {
    FactorValues {
        instruments: common::ids(12),
        dates: common::days(20),
        values: (0..240).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}
