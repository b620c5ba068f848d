//! Closed-form posterior oracle and a two-arm regret environment.

#![allow(clippy::needless_range_loop)]

use alphaloop::bandit::{Action, BanditState, StateVector, UNIFORM_WEIGHTS};
use nalgebra::{Cholesky, SMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Gauss-Jordan solve with partial pivoting on a dense copy.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in 0..n {
            if r != c {
                let f = a[r][c] / a[c][c];
                for k in c..n {
                    a[r][k] -= f * a[c][k];
                }
                b[r] -= f * b[c];
            }
        }
    }
    (0..n).map(|i| b[i] / a[i][i]).collect()
}

/// Batch posterior of one arm: `(mean, precision)`.
fn batch(xs: &[StateVector], rs: &[f64], tau: f64, sigma: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut p = vec![vec![0.0; 8]; 8];
    let mut rhs = vec![0.0; 8];
    for i in 0..8 {
        p[i][i] = 1.0 / (tau * tau);
    }
    for (x, r) in xs.iter().zip(rs) {
        for i in 0..8 {
            rhs[i] += x[i] * r / (sigma * sigma);
            for j in 0..8 {
                p[i][j] += x[i] * x[j] / (sigma * sigma);
            }
        }
    }
    (solve(p.clone(), rhs), p)
}

pub fn random_context(rng: &mut ChaCha8Rng) -> StateVector {
    std::array::from_fn(|_| rng.random_range(-1.0..1.0))
}

pub fn check_sequence(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = rng.random_range(1..=50);
    let (tau, sigma) = (rng.random_range(0.5..2.0), rng.random_range(0.1..1.0));
    let mut state = BanditState::init(tau, sigma, UNIFORM_WEIGHTS).unwrap();
    let xs: Vec<StateVector> = (0..len).map(|_| random_context(&mut rng)).collect();
    let rs: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    for (x, r) in xs.iter().zip(&rs) {
        state.update(Action::Model, x, *r).unwrap();
    }
    let (mu, p) = batch(&xs, &rs, tau, sigma);
    let arm = state.arm(Action::Model);
    for i in 0..8 {
        if (arm.mu[i] - mu[i]).abs() > 1e-8 * mu[i].abs().max(1.0) {
            return Err(format!("mu[{i}] {} vs {}", arm.mu[i], mu[i]));
        }
        for j in 0..8 {
            if (arm.precision[(i, j)] - p[i][j]).abs() > 1e-8 * p[i][j].abs().max(1.0) {
                return Err(format!("P[{i},{j}]"));
            }
        }
    }
    if arm.precision != arm.precision.transpose() || Cholesky::new(arm.precision).is_none() {
        return Err("precision not symmetric PD".into());
    }
    if state.arm(Action::Factor).precision != SMatrix::<f64, 8, 8>::identity() / (tau * tau) {
        return Err("untouched arm changed".into());
    }
    Ok(())
}

/// Fraction of rounds 101..=200 in which the better arm was chosen.
pub fn regret_share(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let best = if seed.is_multiple_of(2) { Action::Factor } else { Action::Model };
    let mut state = BanditState::init(1.0, 0.1, UNIFORM_WEIGHTS).unwrap();
    let mut hits = 0;
    for round in 1..=200 {
        let mut x = random_context(&mut rng);
        x[0] = 1.0;
        let a = state.choose(&x, &mut rng).unwrap();
        let shared: f64 = x[1..].iter().map(|v| 0.2 * v).sum();
        let mean = shared + if a == best { 0.5 } else { 0.0 };
        let r = mean + 0.1 * rng.sample::<f64, _>(StandardNormal);
        state.update(a, &x, r).unwrap();
        if round > 100 && a == best {
            hits += 1;
        }
    }
    hits as f64 / 100.0
}
