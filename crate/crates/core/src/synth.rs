//! Seeded synthetic transactions and random models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Zipf};
use thiserror::Error;

use crate::features::{fnv1a64, Event, EventType, FeatureSpec};
use crate::gbdt::{random_tree, TreeEnsemble, DEFAULT_MAX_DEPTH};
use crate::lstm::{random_weights, LstmWeights};

/// 2016-08-01T00:00:00Z in epoch milliseconds.
pub const START_TS_MS: i64 = 1_470_009_600_000;
pub const MEAN_GAP_MS: f64 = 500.0;
/// Full trees double in size per level, so keep generated ones modest.
pub const MAX_GENERATED_DEPTH: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid size: {0}")]
    Invalid(String),
    #[error("dimension conflict with feature spec: {0}")]
    SpecConflict(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    pub users: u64,
    pub events: usize,
    pub products: u64,
}

fn category_count(products: u64) -> u64 {
    (products / 10).clamp(1, 50)
}

fn order_price(item: &str) -> f64 {
    let cents = 100 + fnv1a64(item.as_bytes()) % 50_000;
    cents as f64 / 100.0
}

/// Clock-sorted events with Zipf-distributed user and product popularity
/// and a 70/20/10 view/impression/order mix.
pub fn generate_events(cfg: &DataConfig) -> Result<Vec<Event>, SynthError> {
    if cfg.users == 0 || cfg.products == 0 {
        return Err(SynthError::Invalid("users and products must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let users = Zipf::new(cfg.users, 1.1).expect("valid Zipf parameters");
    let products = Zipf::new(cfg.products, 1.1).expect("valid Zipf parameters");
    let gaps = Exp::new(1.0 / MEAN_GAP_MS).expect("positive rate");
    let n_categories = category_count(cfg.products);

    let mut ts = START_TS_MS;
    let mut out = Vec::with_capacity(cfg.events);
    for _ in 0..cfg.events {
        ts += gaps.sample(&mut rng) as i64;
        let user = users.sample(&mut rng) as u64 - 1;
        let product = products.sample(&mut rng) as u64 - 1;
        let roll: f64 = rng.gen();
        let event_type = if roll < 0.7 {
            EventType::View
        } else if roll < 0.9 {
            EventType::Impression
        } else {
            EventType::Order
        };
        let item = format!("p{product}");
        let price = (event_type == EventType::Order).then(|| order_price(&item));
        out.push(Event {
            ts,
            user_id: format!("u{user}"),
            event_type,
            category: format!("c{}", product % n_categories),
            item,
            price,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub seed: u64,
    pub hidden: usize,
    pub input_dim: usize,
    pub trees: usize,
    pub depth: usize,
    pub features: usize,
}

impl ModelConfig {
    /// Check sizes, and agreement with `spec` when given.
    pub fn validate(&self, spec: Option<&FeatureSpec>) -> Result<(), SynthError> {
        if self.hidden == 0 || self.input_dim == 0 || self.features == 0 || self.trees == 0 {
            return Err(SynthError::Invalid(
                "hidden, input dim, trees and features must be positive".into(),
            ));
        }
        if self.depth > MAX_GENERATED_DEPTH.min(DEFAULT_MAX_DEPTH) {
            return Err(SynthError::Invalid(format!(
                "depth {} exceeds {MAX_GENERATED_DEPTH}",
                self.depth
            )));
        }
        if let Some(spec) = spec {
            if spec.lstm_input_dim() != self.input_dim {
                return Err(SynthError::SpecConflict(format!(
                    "input dim {} but the spec's LSTM input has length {}",
                    self.input_dim,
                    spec.lstm_input_dim()
                )));
            }
            if spec.n_features() != self.features {
                return Err(SynthError::SpecConflict(format!(
                    "{} features but the spec's one-hot vector has length {}",
                    self.features,
                    spec.n_features()
                )));
            }
        }
        Ok(())
    }
}

/// Random LSTM weights uniform in ±0.5/√hidden and full random trees.
pub fn generate_models(
    cfg: &ModelConfig,
    spec: Option<&FeatureSpec>,
) -> Result<(LstmWeights, TreeEnsemble), SynthError> {
    cfg.validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = 0.5 / (cfg.hidden as f64).sqrt();
    let lstm = random_weights(&mut rng, cfg.input_dim, cfg.hidden, scale).expect("finite generated weights");
    let leaf_scale = 1.0 / cfg.trees as f64;
    let trees = (0..cfg.trees)
        .map(|_| random_tree(&mut rng, cfg.depth, cfg.features, leaf_scale))
        .collect();
    let gbdt = TreeEnsemble::new(cfg.features, 0.0, trees).expect("valid generated trees");
    Ok((lstm, gbdt))
}
