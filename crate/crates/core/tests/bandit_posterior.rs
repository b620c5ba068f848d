mod common;

use alphaloop::bandit::{Action, BanditState, StateVector, UNIFORM_WEIGHTS};
use common::bandit_oracle::{check_sequence, random_context, regret_share};
use nalgebra::Cholesky;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn sequential_updates_match_batch_posterior() {
    for seed in 0..100 {
        check_sequence(seed).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
    }
}

#[test]
fn better_arm_dominates_late_rounds() {
    let share: f64 = (0..20).map(regret_share).sum::<f64>() / 20.0;
    assert!(share >= 0.8, "better arm share {share}");
}

proptest! {
    #[test]
    fn choice_ignores_positive_context_scaling(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = BanditState::init(1.0, 0.5, UNIFORM_WEIGHTS).unwrap();
        for _ in 0..5 {
            let x = random_context(&mut rng);
            state.update(Action::Factor, &x, rng.random_range(-1.0..1.0)).unwrap();
        }
        let x = random_context(&mut rng);
        let sx: StateVector = x.map(|v| v * scale);
        let a = state.choose(&x, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = state.choose(&sx, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn precision_stays_positive_definite(updates in prop::collection::vec((prop::array::uniform8(-5.0f64..5.0), -3.0f64..3.0), 0..40)) {
        let mut state = BanditState::init(1.0, 1.0, UNIFORM_WEIGHTS).unwrap();
        for (x, r) in &updates {
            state.update(Action::Factor, x, *r).unwrap();
        }
        let p = state.arm(Action::Factor).precision;
        prop_assert_eq!(p, p.transpose());
        prop_assert!(Cholesky::new(p).is_some());
    }
}
