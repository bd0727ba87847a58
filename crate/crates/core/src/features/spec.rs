//! Feature layout: the ordered one-hot blocks that make up the tree model's
//! input, and the per-event LSTM input encoding.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::event::{Event, EventType};
use super::FeatureError;

/// Event attribute used by categorical blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Item,
    Category,
    EventType,
}

impl Attribute {
    pub fn value<'a>(&self, event: &'a Event) -> &'a str {
        match self {
            Attribute::Item => &event.item,
            Attribute::Category => &event.category,
            Attribute::EventType => event.event_type.as_str(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BlockSpec {
    /// Count of matching events, within a trailing window when
    /// `window_secs` is set, bucketed by `boundaries`.
    TemporalCounter {
        name: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        event_type: Option<EventType>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        window_secs: Option<u64>,
        boundaries: Vec<u64>,
        /// Optional declared width; must equal `boundaries.len() + 1`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        width: Option<usize>,
    },
    /// One-hot of the most frequent hashed value (ties to the lowest bucket).
    CategoricalFavorite {
        name: String,
        attribute: Attribute,
        buckets: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        event_type: Option<EventType>,
    },
    /// One-hot of the hashed value on the most recent matching event.
    CategoricalIdentity {
        name: String,
        attribute: Attribute,
        buckets: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        event_type: Option<EventType>,
    },
}

impl BlockSpec {
    pub fn name(&self) -> &str {
        match self {
            BlockSpec::TemporalCounter { name, .. }
            | BlockSpec::CategoricalFavorite { name, .. }
            | BlockSpec::CategoricalIdentity { name, .. } => name,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            BlockSpec::TemporalCounter { boundaries, .. } => boundaries.len() + 1,
            BlockSpec::CategoricalFavorite { buckets, .. }
            | BlockSpec::CategoricalIdentity { buckets, .. } => *buckets as usize,
        }
    }

    pub fn event_filter(&self) -> Option<EventType> {
        match self {
            BlockSpec::TemporalCounter { event_type, .. }
            | BlockSpec::CategoricalFavorite { event_type, .. }
            | BlockSpec::CategoricalIdentity { event_type, .. } => *event_type,
        }
    }

    pub fn matches(&self, event: &Event) -> bool {
        self.event_filter().map_or(true, |t| t == event.event_type)
    }

    pub fn window_ms(&self) -> Option<i64> {
        match self {
            BlockSpec::TemporalCounter { window_secs, .. } => {
                window_secs.map(|s| (s as i64).saturating_mul(1000))
            }
            _ => None,
        }
    }

    fn validate(&self) -> Result<(), FeatureError> {
        let cfg = |msg: String| Err(FeatureError::Config(format!("block {:?}: {msg}", self.name())));
        match self {
            BlockSpec::TemporalCounter {
                window_secs,
                boundaries,
                width,
                ..
            } => {
                if boundaries.is_empty() {
                    return cfg("boundaries must not be empty".into());
                }
                if !boundaries.windows(2).all(|w| w[0] < w[1]) {
                    return cfg("boundaries must be strictly increasing".into());
                }
                if *window_secs == Some(0) {
                    return cfg("window_secs must be positive".into());
                }
                if let Some(w) = width {
                    if *w != boundaries.len() + 1 {
                        return cfg(format!(
                            "declared width {w} but {} boundaries give {} buckets",
                            boundaries.len(),
                            boundaries.len() + 1
                        ));
                    }
                }
                Ok(())
            }
            BlockSpec::CategoricalFavorite { buckets, .. }
            | BlockSpec::CategoricalIdentity { buckets, .. } => {
                if *buckets < 2 {
                    return cfg(format!("buckets must be >= 2, got {buckets}"));
                }
                Ok(())
            }
        }
    }
}

/// One component of the per-event LSTM input vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LstmInputSpec {
    /// One-hot over view / order / impression.
    EventType,
    /// One-hot of the hashed attribute value.
    Hashed { attribute: Attribute, buckets: u32 },
    /// `price / scale`, 0 when absent.
    Price { scale: f64 },
}

impl LstmInputSpec {
    pub fn width(&self) -> usize {
        match self {
            LstmInputSpec::EventType => EventType::ALL.len(),
            LstmInputSpec::Hashed { buckets, .. } => *buckets as usize,
            LstmInputSpec::Price { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub blocks: Vec<BlockSpec>,
    pub lstm_input: Vec<LstmInputSpec>,
}

impl FeatureSpec {
    pub fn new(blocks: Vec<BlockSpec>, lstm_input: Vec<LstmInputSpec>) -> Result<Self, FeatureError> {
        let spec = Self { blocks, lstm_input };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.blocks.is_empty() {
            return Err(FeatureError::Config("at least one feature block is required".into()));
        }
        if self.lstm_input.is_empty() {
            return Err(FeatureError::Config("lstm_input must not be empty".into()));
        }
        for b in &self.blocks {
            b.validate()?;
        }
        for c in &self.lstm_input {
            match c {
                LstmInputSpec::Hashed { buckets, .. } if *buckets < 2 => {
                    return Err(FeatureError::Config(format!(
                        "lstm_input hashed buckets must be >= 2, got {buckets}"
                    )));
                }
                LstmInputSpec::Price { scale } if !(scale.is_finite() && *scale > 0.0) => {
                    return Err(FeatureError::Config(format!(
                        "lstm_input price scale must be positive, got {scale}"
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Length of the concatenated one-hot vector.
    pub fn n_features(&self) -> usize {
        self.blocks.iter().map(BlockSpec::width).sum()
    }

    /// Offset of each block in the concatenated vector.
    pub fn block_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.blocks.len());
        let mut at = 0;
        for b in &self.blocks {
            offsets.push(at);
            at += b.width();
        }
        offsets
    }

    /// Length of the LSTM input vector.
    pub fn lstm_input_dim(&self) -> usize {
        self.lstm_input.iter().map(LstmInputSpec::width).sum()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FeatureError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| FeatureError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, FeatureError> {
        let spec: Self =
            serde_json::from_str(text).map_err(|e| FeatureError::Config(format!("feature spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("feature spec serializes")
    }

    /// Illustrative default layout: short- and long-window activity counters,
    /// favourite category, and the most recently touched item.
    pub fn default_spec() -> Self {
        Self::from_json(DEFAULT_SPEC_JSON).expect("built-in spec is valid")
    }
}

pub const DEFAULT_SPEC_JSON: &str = r#"{
  "blocks": [
    {"type": "temporal_counter", "name": "views_2h", "event_type": "view", "window_secs": 7200, "boundaries": [1, 3, 10]},
    {"type": "temporal_counter", "name": "impressions_2h", "event_type": "impression", "window_secs": 7200, "boundaries": [1, 3, 10]},
    {"type": "temporal_counter", "name": "orders_3d", "event_type": "order", "window_secs": 259200, "boundaries": [1, 2, 5]},
    {"type": "temporal_counter", "name": "events_total", "boundaries": [1, 5, 20, 100]},
    {"type": "categorical_favorite", "name": "favorite_category", "attribute": "category", "buckets": 16},
    {"type": "categorical_favorite", "name": "favorite_order_category", "attribute": "category", "buckets": 16, "event_type": "order"},
    {"type": "categorical_identity", "name": "last_item", "attribute": "item", "buckets": 32}
  ],
  "lstm_input": [
    {"type": "event_type"},
    {"type": "hashed", "attribute": "category", "buckets": 8},
    {"type": "price", "scale": 100.0}
  ]
}"#;
