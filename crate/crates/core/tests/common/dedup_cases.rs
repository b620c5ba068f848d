//! Seeded de-duplication scenarios on a 100 x 500 grid.

use alphaloop::panel::FactorValues;
use alphaloop::validation::{dedup, DedupConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{days, ids};

pub const N: usize = 100;
pub const T: usize = 500;

pub fn noise(rng: &mut ChaCha8Rng) -> FactorValues {
    FactorValues {
        instruments: ids(N),
        dates: days(T),
        values: (0..N * T).map(|_| rng.sample(StandardNormal)).collect(),
    }
}

fn sota(rng: &mut ChaCha8Rng) -> Vec<FactorValues> {
    (0..10).map(|_| noise(rng)).collect()
}

/// A fresh noise candidate survives ten noise incumbents.
pub fn noise_kept(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lib = sota(&mut rng);
    let cand = noise(&mut rng);
    let refs: Vec<&FactorValues> = lib.iter().collect();
    dedup(&refs, &[cand], &DedupConfig::default()).unwrap() == vec![0]
}

/// Copies of incumbents are dropped, with or without a positive rescale.
pub fn duplicates_dropped(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lib = sota(&mut rng);
    let refs: Vec<&FactorValues> = lib.iter().collect();
    let k = rng.random_range(0..lib.len());
    let mut scaled = lib[k].clone();
    let (a, b) = (rng.random_range(0.1..10.0), rng.random_range(-5.0..5.0));
    scaled.values.iter_mut().for_each(|v| *v = a * *v + b);
    dedup(&refs, &[lib[k].clone(), scaled], &DedupConfig::default()).unwrap().is_empty()
}

/// Kept indices do not depend on the order of the incumbents.
pub fn permutation_stable(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lib = sota(&mut rng);
    let mut cands: Vec<FactorValues> = (0..4).map(|_| noise(&mut rng)).collect();
    cands.push(lib[3].clone());
    cands.push(lib[7].clone());
    let mut order: Vec<usize> = (0..lib.len()).collect();
    for k in (1..order.len()).rev() {
        order.swap(k, rng.random_range(0..=k));
    }
    let a: Vec<&FactorValues> = lib.iter().collect();
    let b: Vec<&FactorValues> = order.iter().map(|&k| &lib[k]).collect();
    let cfg = DedupConfig::default();
    let ka = dedup(&a, &cands, &cfg).unwrap();
    ka == dedup(&b, &cands, &cfg).unwrap() && ka == vec![0, 1, 2, 3]
}
