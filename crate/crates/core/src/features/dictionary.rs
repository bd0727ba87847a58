//! Per-user cumulative feature state ("feature dictionary") and its
//! concatenated one-hot encoding.

use std::collections::{BTreeMap, VecDeque};

use super::event::Event;
use super::spec::{BlockSpec, FeatureSpec, LstmInputSpec};

const FNV_OFFSET_BASIS: u64 = 14_695_981_039_346_656_037;
const FNV_PRIME: u64 = 1_099_511_628_211;

/// 64-bit FNV-1a over raw bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |hash, &b| {
        (hash ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// Map a categorical value to a bucket in `[0, buckets)` by hashing its
/// UTF-8 bytes. Stable across platforms and runs.
pub fn encode_categorical(value: &str, buckets: u32) -> u32 {
    assert!(buckets >= 2, "bucket count must be at least 2");
    (fnv1a64(value.as_bytes()) % u64::from(buckets)) as u32
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockState {
    /// Event timestamps inside the window (empty for unwindowed counters)
    /// and the running count.
    Counter { window: VecDeque<i64>, count: u64 },
    /// bucket -> number of matching events
    Favorite { counts: BTreeMap<u32, u64> },
    /// Bucket of the most recent matching event.
    Identity { current: Option<u32> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureDictionary {
    pub blocks: Vec<BlockState>,
}

impl FeatureDictionary {
    pub fn empty(spec: &FeatureSpec) -> Self {
        let blocks = spec
            .blocks
            .iter()
            .map(|b| match b {
                BlockSpec::TemporalCounter { .. } => BlockState::Counter {
                    window: VecDeque::new(),
                    count: 0,
                },
                BlockSpec::CategoricalFavorite { .. } => BlockState::Favorite {
                    counts: BTreeMap::new(),
                },
                BlockSpec::CategoricalIdentity { .. } => BlockState::Identity { current: None },
            })
            .collect();
        Self { blocks }
    }

    /// Fold one event in, then evict window entries relative to its time.
    pub fn apply(&mut self, spec: &FeatureSpec, event: &Event) {
        for (block, state) in spec.blocks.iter().zip(self.blocks.iter_mut()) {
            if !block.matches(event) {
                continue;
            }
            match (block, state) {
                (BlockSpec::TemporalCounter { window_secs, .. }, BlockState::Counter { window, count }) => {
                    if window_secs.is_some() {
                        window.push_back(event.ts);
                    }
                    *count += 1;
                }
                (
                    BlockSpec::CategoricalFavorite {
                        attribute, buckets, ..
                    },
                    BlockState::Favorite { counts },
                ) => {
                    let bucket = encode_categorical(attribute.value(event), *buckets);
                    *counts.entry(bucket).or_insert(0) += 1;
                }
                (
                    BlockSpec::CategoricalIdentity {
                        attribute, buckets, ..
                    },
                    BlockState::Identity { current },
                ) => {
                    *current = Some(encode_categorical(attribute.value(event), *buckets));
                }
                _ => unreachable!("dictionary layout follows the spec"),
            }
        }
        self.evict(spec, event.ts);
    }

    /// Drop window entries with `as_of - ts >= window`.
    pub fn evict(&mut self, spec: &FeatureSpec, as_of: i64) {
        for (block, state) in spec.blocks.iter().zip(self.blocks.iter_mut()) {
            let (Some(window_ms), BlockState::Counter { window, count }) = (block.window_ms(), state) else {
                continue;
            };
            while let Some(&front) = window.front() {
                if as_of.saturating_sub(front) >= window_ms {
                    window.pop_front();
                } else {
                    break;
                }
            }
            *count = window.len() as u64;
        }
    }

    /// Current value of a counter block, if `index` names one.
    pub fn counter(&self, index: usize) -> Option<u64> {
        match self.blocks.get(index) {
            Some(BlockState::Counter { count, .. }) => Some(*count),
            _ => None,
        }
    }

    /// One-hot index within each block.
    pub fn block_indices(&self, spec: &FeatureSpec) -> Vec<u32> {
        spec.blocks
            .iter()
            .zip(&self.blocks)
            .map(|(block, state)| match (block, state) {
                (BlockSpec::TemporalCounter { boundaries, .. }, BlockState::Counter { count, .. }) => {
                    counter_bucket(*count, boundaries)
                }
                (BlockSpec::CategoricalFavorite { .. }, BlockState::Favorite { counts }) => {
                    favorite_bucket(counts)
                }
                (BlockSpec::CategoricalIdentity { .. }, BlockState::Identity { current }) => {
                    current.unwrap_or_else(|| cold_identity_bucket(block))
                }
                _ => unreachable!("dictionary layout follows the spec"),
            })
            .collect()
    }

    /// Concatenated one-hot vector.
    pub fn vectorize(&self, spec: &FeatureSpec) -> OneHotVector {
        let offsets = spec.block_offsets();
        let indices = self
            .block_indices(spec)
            .into_iter()
            .zip(offsets)
            .map(|(i, off)| off as u32 + i)
            .collect();
        OneHotVector {
            indices,
            len: spec.n_features() as u32,
        }
    }
}

/// Boundaries `b_0 < ... < b_k`: below `b_0` is bucket 0, `[b_i, b_{i+1})`
/// is bucket `i + 1`, and `>= b_k` is bucket `k + 1`.
pub fn counter_bucket(count: u64, boundaries: &[u64]) -> u32 {
    boundaries.partition_point(|&b| b <= count) as u32
}

/// Bucket with the highest count, ties to the lowest bucket; bucket 0 when
/// nothing has been counted.
pub fn favorite_bucket(counts: &BTreeMap<u32, u64>) -> u32 {
    let mut best = (0u32, 0u64);
    for (&bucket, &count) in counts {
        if count > best.1 {
            best = (bucket, count);
        }
    }
    best.0
}

/// Identity blocks with no matching event yet encode the empty string.
fn cold_identity_bucket(block: &BlockSpec) -> u32 {
    match block {
        BlockSpec::CategoricalIdentity { buckets, .. } => encode_categorical("", *buckets),
        _ => 0,
    }
}

/// Sparse binary vector: sorted set positions and total length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OneHotVector {
    pub indices: Vec<u32>,
    pub len: u32,
}

impl OneHotVector {
    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.len as usize];
        self.fill_dense(&mut v);
        v
    }

    pub fn fill_dense(&self, out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        for &i in &self.indices {
            out[i as usize] = 1.0;
        }
    }

    /// Exactly one strictly increasing index per block, inside its block.
    pub fn is_well_formed(&self, spec: &FeatureSpec) -> bool {
        self.len as usize == spec.n_features()
            && self.indices.len() == spec.blocks.len()
            && self.indices.windows(2).all(|w| w[0] < w[1])
            && spec
                .block_offsets()
                .iter()
                .zip(&spec.blocks)
                .zip(&self.indices)
                .all(|((&off, b), &i)| (i as usize) >= off && (i as usize) < off + b.width())
    }
}

/// Per-event LSTM input vector. Depends only on the event itself, so batch
/// replay and streaming updates see identical inputs.
pub fn encode_lstm_input(spec: &FeatureSpec, event: &Event) -> Vec<f64> {
    let mut x = Vec::with_capacity(spec.lstm_input_dim());
    for part in &spec.lstm_input {
        match part {
            LstmInputSpec::EventType => {
                let mut block = [0.0; 3];
                block[event.event_type.index()] = 1.0;
                x.extend_from_slice(&block);
            }
            LstmInputSpec::Hashed { attribute, buckets } => {
                let start = x.len();
                x.resize(start + *buckets as usize, 0.0);
                x[start + encode_categorical(attribute.value(event), *buckets) as usize] = 1.0;
            }
            LstmInputSpec::Price { scale } => x.push(event.price.unwrap_or(0.0) / scale),
        }
    }
    x
}
