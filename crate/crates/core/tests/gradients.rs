use std::time::Instant;

use mospred::batching::PaddedBatch;
use mospred::dataset::class_to_mos;
use mospred::model::{Head, Model, ModelConfig};
use mospred::training::{check_gradients, Objective, RegressionLoss};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Below this magnitude, gradients are compared in absolute terms: central differences at ε=1e-5
/// carry roughly 1e-10 of roundoff on O(1) losses.
const FLOOR: f64 = 1e-5;

fn random_case(seed: u64, head: Head) -> (Model, PaddedBatch, Vec<f64>, Objective) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        lstm_hidden: 8,
        dense_hidden: 8,
        ..ModelConfig::regression(16)
    }
    .with_head(head);
    let model = Model::init(cfg, seed).unwrap();
    let lengths: Vec<usize> = (0..3).map(|_| rng.random_range(1..=12)).collect();
    let rows: Vec<Vec<f64>> = lengths
        .iter()
        .map(|&l| (0..l * 16).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let batch = PaddedBatch::from_rows(&rows, &lengths, 16).unwrap();
    let (targets, objective) = match head {
        Head::Regression => (
            (0..3).map(|_| rng.random_range(1.0..5.0)).collect(),
            Objective::Regression(RegressionLoss::Mse),
        ),
        Head::Classification => (
            (0..3).map(|_| class_to_mos(rng.random_range(1..=33)).unwrap()).collect(),
            Objective::Classification((0..33).map(|_| rng.random_range(0.5..2.0)).collect()),
        ),
    };
    (model, batch, targets, objective)
}

#[test]
fn analytic_gradients_match_central_differences() {
    let start = Instant::now();
    for head in [Head::Regression, Head::Classification] {
        for seed in 0..5 {
            let (model, batch, targets, objective) = random_case(seed, head);
            let r = check_gradients(&model, &batch, &targets, &objective, seed, 1e-5, FLOOR).unwrap();
            println!("{head} seed {seed}: {} params, max rel err {:.3e} at {}[{}]", r.checked, r.max_rel_error, r.worst_tensor, r.worst_index);
            assert!(r.max_rel_error < 1e-4, "{head} seed {seed}: {r:?}");
        }
    }
    assert!(start.elapsed().as_secs() < 30);
}

#[test]
fn l1_gradient_matches_away_from_kinks() {
    // Targets far from every prediction keep the sign of each residual fixed under perturbation.
    let (model, batch, _, _) = random_case(11, Head::Regression);
    let targets = vec![10.0, -10.0, 10.0];
    let obj = Objective::Regression(RegressionLoss::L1);
    let r = check_gradients(&model, &batch, &targets, &obj, 3, 1e-5, FLOOR).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

