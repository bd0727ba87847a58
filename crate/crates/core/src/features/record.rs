//! User records: the batch two-pass build and the per-event streaming update.
//!
//! Both paths produce the same records for the same clock-ordered stream.
//! Batch: pass 1 folds every event into a dictionary, pass 2 one-hot encodes
//! the dictionaries, and the LSTM state is replayed over the user's event
//! inputs. Streaming: [`update_features`] advances one record by one event.

use std::collections::BTreeMap;

use crate::lstm::{LstmState, LstmWeights};

use super::dictionary::{encode_lstm_input, FeatureDictionary, OneHotVector};
use super::event::Event;
use super::spec::FeatureSpec;
use super::FeatureError;

/// Timestamp of a record that has never seen an event.
pub const NEVER: i64 = i64::MIN;

#[derive(Debug, Clone, PartialEq)]
pub struct UserRecord {
    pub user_id: String,
    pub dictionary: FeatureDictionary,
    /// Cached `dictionary.vectorize(spec)`.
    pub onehot: OneHotVector,
    pub lstm_state: LstmState,
    /// Epoch milliseconds the record is current as of.
    pub last_update: i64,
}

impl UserRecord {
    /// Record for a user with no history: empty dictionary, zero LSTM state.
    pub fn cold_start(user_id: impl Into<String>, spec: &FeatureSpec, hidden_dim: usize) -> Self {
        let dictionary = FeatureDictionary::empty(spec);
        let onehot = dictionary.vectorize(spec);
        Self {
            user_id: user_id.into(),
            dictionary,
            onehot,
            lstm_state: LstmState::zeros(hidden_dim),
            last_update: NEVER,
        }
    }

    /// Evict windows as of a later time without folding in an event.
    pub fn refresh(&self, spec: &FeatureSpec, as_of: i64) -> Result<UserRecord, FeatureError> {
        if as_of < self.last_update {
            return Err(FeatureError::Stale {
                user_id: self.user_id.clone(),
                ts: as_of,
                last_update: self.last_update,
            });
        }
        let mut dictionary = self.dictionary.clone();
        dictionary.evict(spec, as_of);
        let onehot = dictionary.vectorize(spec);
        Ok(UserRecord {
            user_id: self.user_id.clone(),
            dictionary,
            onehot,
            lstm_state: self.lstm_state.clone(),
            last_update: as_of,
        })
    }

    pub fn is_coherent(&self, spec: &FeatureSpec) -> bool {
        self.onehot == self.dictionary.vectorize(spec)
    }
}

/// Fold one event into a record: dictionary and windows, one-hot cache,
/// and one LSTM step. Events older than `last_update` are rejected and the
/// input record is left as is.
pub fn update_features(
    record: &UserRecord,
    event: &Event,
    spec: &FeatureSpec,
    lstm: &LstmWeights,
) -> Result<UserRecord, FeatureError> {
    if event.user_id != record.user_id {
        return Err(FeatureError::UserMismatch {
            record: record.user_id.clone(),
            event: event.user_id.clone(),
        });
    }
    if event.ts < record.last_update {
        return Err(FeatureError::Stale {
            user_id: record.user_id.clone(),
            ts: event.ts,
            last_update: record.last_update,
        });
    }
    event.validate()?;
    let lstm_state = lstm.step(&record.lstm_state, &encode_lstm_input(spec, event))?;
    let mut dictionary = record.dictionary.clone();
    dictionary.apply(spec, event);
    let onehot = dictionary.vectorize(spec);
    Ok(UserRecord {
        user_id: record.user_id.clone(),
        dictionary,
        onehot,
        lstm_state,
        last_update: event.ts,
    })
}

fn check_order(events: &[Event], as_of: i64) -> Result<(), FeatureError> {
    let mut prev_ts = i64::MIN;
    for (i, e) in events.iter().enumerate() {
        if e.ts < prev_ts {
            return Err(FeatureError::OutOfOrder {
                position: format!("event {i}"),
                ts: e.ts,
                prev_ts,
            });
        }
        if e.ts > as_of {
            return Err(FeatureError::AfterAsOf {
                position: format!("event {i}"),
                ts: e.ts,
                as_of,
            });
        }
        prev_ts = e.ts;
    }
    Ok(())
}

/// First pass: per-user dictionaries with windows evicted as of `as_of`.
pub fn build_pass1(
    events: &[Event],
    spec: &FeatureSpec,
    as_of: i64,
) -> Result<BTreeMap<String, FeatureDictionary>, FeatureError> {
    check_order(events, as_of)?;
    let mut dicts: BTreeMap<String, FeatureDictionary> = BTreeMap::new();
    for e in events {
        e.validate()?;
        dicts
            .entry(e.user_id.clone())
            .or_insert_with(|| FeatureDictionary::empty(spec))
            .apply(spec, e);
    }
    for d in dicts.values_mut() {
        d.evict(spec, as_of);
    }
    Ok(dicts)
}

/// Second pass: concatenated one-hot vectors.
pub fn build_pass2(
    dicts: &BTreeMap<String, FeatureDictionary>,
    spec: &FeatureSpec,
) -> Result<BTreeMap<String, OneHotVector>, FeatureError> {
    dicts
        .iter()
        .map(|(user, d)| {
            if d.blocks.len() != spec.blocks.len() {
                return Err(FeatureError::Config(format!(
                    "dictionary for {user} has {} blocks, spec has {}",
                    d.blocks.len(),
                    spec.blocks.len()
                )));
            }
            Ok((user.clone(), d.vectorize(spec)))
        })
        .collect()
}

/// Per-user LSTM warm-up by replaying each user's event inputs.
pub fn build_lstm_states(
    events: &[Event],
    spec: &FeatureSpec,
    lstm: &LstmWeights,
) -> Result<BTreeMap<String, LstmState>, FeatureError> {
    let mut sequences: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    for e in events {
        sequences
            .entry(e.user_id.as_str())
            .or_default()
            .push(encode_lstm_input(spec, e));
    }
    sequences
        .into_iter()
        .map(|(user, seq)| Ok((user.to_string(), lstm.replay(&seq)?)))
        .collect()
}

/// Full batch build of every user record as of `as_of`.
pub fn build_records(
    events: &[Event],
    spec: &FeatureSpec,
    lstm: &LstmWeights,
    as_of: i64,
) -> Result<Vec<UserRecord>, FeatureError> {
    check_dims(spec, lstm)?;
    let dicts = build_pass1(events, spec, as_of)?;
    let onehots = build_pass2(&dicts, spec)?;
    let mut states = build_lstm_states(events, spec, lstm)?;
    Ok(dicts
        .into_iter()
        .zip(onehots)
        .map(|((user_id, dictionary), (_, onehot))| {
            let lstm_state = states.remove(&user_id).expect("every user has a sequence");
            UserRecord {
                user_id,
                dictionary,
                onehot,
                lstm_state,
                last_update: as_of,
            }
        })
        .collect())
}

pub fn check_dims(spec: &FeatureSpec, lstm: &LstmWeights) -> Result<(), FeatureError> {
    if spec.lstm_input_dim() != lstm.input_dim() {
        return Err(FeatureError::Config(format!(
            "feature spec yields LSTM input of length {}, model expects {}",
            spec.lstm_input_dim(),
            lstm.input_dim()
        )));
    }
    Ok(())
}
