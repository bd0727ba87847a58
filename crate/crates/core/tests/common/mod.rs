#![allow(dead_code)]

use std::sync::Arc;

use nbo_core::ensemble::EnsembleModel;
use nbo_core::features::build_records;
use nbo_core::synth::{generate_events, generate_models, DataConfig, ModelConfig};
use nbo_core::{Event, FeatureSpec, FeatureStore, Models};

pub fn toy_models(seed: u64, hidden: usize) -> Models {
    let spec = FeatureSpec::default_spec();
    let cfg = ModelConfig {
        seed,
        hidden,
        input_dim: spec.lstm_input_dim(),
        trees: 8,
        depth: 4,
        features: spec.n_features(),
    };
    let (lstm, gbdt) = generate_models(&cfg, Some(&spec)).unwrap();
    Models::new(spec, lstm, gbdt, EnsembleModel::default()).unwrap()
}

pub fn events(seed: u64, users: u64, n: usize) -> Vec<Event> {
    generate_events(&DataConfig {
        seed,
        users,
        events: n,
        products: 300,
    })
    .unwrap()
}

pub fn store_from(models: &Models, events: &[Event], partitions: usize) -> FeatureStore {
    let as_of = events.last().map(|e| e.ts).unwrap_or(0);
    let records = build_records(events, &models.spec, &models.lstm, as_of).unwrap();
    FeatureStore::from_records(models.spec.clone(), models.lstm.hidden_dim(), partitions, records)
}

pub fn empty_store(models: &Models, partitions: usize) -> FeatureStore {
    FeatureStore::new(Arc::clone(&models.spec), models.lstm.hidden_dim(), partitions)
}
