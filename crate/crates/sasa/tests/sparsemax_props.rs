//! Property tests for the simplex projection: simplex membership, shift
//! invariance, agreement with an independent oracle, and the sparsity
//! that separates it from softmax.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sasa::sparsemax::sparsemax;

/// Independent oracle: bisection on the water-filling threshold.
fn project_by_bisection(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut lo = max - z.len() as f64;
    let mut hi = max;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let mass: f64 = z.iter().map(|&v| (v - mid).max(0.0)).sum();
        if mass > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    z.iter().map(|&v| (v - tau).max(0.0)).collect()
}

proptest! {
    #[test]
    fn output_lies_on_the_simplex(z in proptest::collection::vec(-10.0f64..10.0, 1..64)) {
        let p = sparsemax(&z);
        let total: f64 = p.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn shift_invariance(
        z in proptest::collection::vec(-5.0f64..5.0, 2..32),
        c in -20.0f64..20.0,
    ) {
        let base = sparsemax(&z);
        let shifted: Vec<f64> = z.iter().map(|&v| v + c).collect();
        let moved = sparsemax(&shifted);
        for (a, b) in base.iter().zip(&moved) {
            prop_assert!((a - b).abs() < 1e-9, "{base:?} vs {moved:?}");
        }
    }

    #[test]
    fn agrees_with_bisection_oracle(z in proptest::collection::vec(-6.0f64..6.0, 1..64)) {
        let fast = sparsemax(&z);
        let oracle = project_by_bisection(&z);
        for (a, b) in fast.iter().zip(&oracle) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn oracle_equivalence_over_many_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..2000 {
        let k = rng.gen_range(2..=64);
        let z: Vec<f64> = (0..k).map(|_| 2.0 * gaussian(&mut rng)).collect();
        let fast = sparsemax(&z);
        let oracle = project_by_bisection(&z);
        for (a, b) in fast.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-6, "K = {k}");
        }
    }
}

#[test]
fn spread_scores_usually_produce_exact_zeros() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let draws = 1000;
    let mut with_zero = 0;
    for _ in 0..draws {
        let k = rng.gen_range(2..=64);
        let z: Vec<f64> = (0..k).map(|_| 2.0 * gaussian(&mut rng)).collect();
        if sparsemax(&z).iter().any(|&v| v == 0.0) {
            with_zero += 1;
        }
    }
    assert!(
        with_zero * 2 >= draws,
        "only {with_zero}/{draws} draws had an exact zero"
    );
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
