//! Seeded fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nbo_core::ensemble::EnsembleModel;
use nbo_core::features::build_records;
use nbo_core::gbdt::random_tree;
use nbo_core::lstm::random_weights;
use nbo_core::synth::{generate_events, generate_models, DataConfig, ModelConfig};
use nbo_core::{Event, FeatureSpec, FeatureStore, LstmWeights, Models, TreeEnsemble};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn lstm(input_dim: usize, hidden: usize) -> LstmWeights {
    random_weights(&mut rng(1), input_dim, hidden, 0.5 / (hidden as f64).sqrt()).unwrap()
}

pub fn sequence(len: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut r = rng(2);
    (0..len).map(|_| (0..dim).map(|_| r.gen_range(-1.0..=1.0)).collect()).collect()
}

pub fn ensemble(trees: usize, depth: usize, features: usize) -> TreeEnsemble {
    let mut r = rng(3);
    let trees = (0..trees).map(|_| random_tree(&mut r, depth, features, 0.1)).collect();
    TreeEnsemble::new(features, 0.0, trees).unwrap()
}

/// Sparse binary rows, like the one-hot inputs the engine produces.
pub fn onehot_rows(rows: usize, features: usize) -> Vec<Vec<f64>> {
    let mut r = rng(4);
    (0..rows)
        .map(|_| (0..features).map(|_| if r.gen_bool(0.1) { 1.0 } else { 0.0 }).collect())
        .collect()
}

pub fn scored(n: usize) -> (Vec<f64>, Vec<bool>) {
    let mut r = rng(5);
    let scores: Vec<f64> = (0..n).map(|_| r.gen()).collect();
    let labels = scores.iter().map(|&s| r.gen_bool(s)).collect();
    (scores, labels)
}

pub fn events(users: u64, n: usize) -> Vec<Event> {
    generate_events(&DataConfig {
        seed: 6,
        users,
        events: n,
        products: 2000,
    })
    .unwrap()
}

pub fn models(hidden: usize, trees: usize, depth: usize) -> Models {
    let spec = FeatureSpec::default_spec();
    let cfg = ModelConfig {
        seed: 7,
        hidden,
        input_dim: spec.lstm_input_dim(),
        trees,
        depth,
        features: spec.n_features(),
    };
    let (l, g) = generate_models(&cfg, Some(&spec)).unwrap();
    Models::new(spec, l, g, EnsembleModel::default()).unwrap()
}

pub fn store(models: &Models, events: &[Event], partitions: usize) -> FeatureStore {
    let as_of = events.last().map_or(0, |e| e.ts);
    let records = build_records(events, &models.spec, &models.lstm, as_of).unwrap();
    FeatureStore::from_records(models.spec.clone(), models.lstm.hidden_dim(), partitions, records)
}
