//! Feature store: per-user feature dictionaries, concatenated one-hot
//! vectors and cached LSTM state, in a user-partitioned in-memory store.

mod dictionary;
mod event;
mod record;
mod spec;
mod store;

use thiserror::Error;

use crate::lstm::LstmError;

pub use dictionary::{
    counter_bucket, encode_categorical, encode_lstm_input, favorite_bucket, fnv1a64, BlockState,
    FeatureDictionary, OneHotVector,
};
pub use event::{read_events, read_events_file, write_events, Event, EventType, CSV_HEADER};
pub use record::{
    build_lstm_states, build_pass1, build_pass2, build_records, check_dims, update_features,
    UserRecord, NEVER,
};
pub use spec::{Attribute, BlockSpec, FeatureSpec, LstmInputSpec, DEFAULT_SPEC_JSON};
pub use store::{partition_of, FeatureStore, Lookup};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("out-of-order event at {position}: ts {ts} < previous {prev_ts}")]
    OutOfOrder {
        position: String,
        ts: i64,
        prev_ts: i64,
    },
    #[error("event at {position} has ts {ts} after as_of {as_of}")]
    AfterAsOf { position: String, ts: i64, as_of: i64 },
    #[error("stale event for {user_id}: ts {ts} < last_update {last_update}")]
    Stale {
        user_id: String,
        ts: i64,
        last_update: i64,
    },
    #[error("event for {event} applied to record of {record}")]
    UserMismatch { record: String, event: String },
    #[error("invalid event: {0}")]
    InvalidEvent(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Lstm(#[from] LstmError),
}
