//! Online next-best-offer engine: an LSTM with per-user cached state, a
//! gradient-boosted tree ensemble, a weighted blend of the two, a
//! partitioned in-memory feature store and a TCP serving layer.

mod modelio;

pub mod engine;
pub mod ensemble;
pub mod features;
pub mod gbdt;
pub mod loadgen;
pub mod lstm;
pub mod metrics;
pub mod pipeline;
pub mod serving;
pub mod snapshot;
pub mod synth;

pub use engine::{ModelError, Models, Prediction, PreparedInput};
pub use ensemble::{EnsembleError, EnsembleModel};
pub use features::{Event, EventType, FeatureError, FeatureSpec, FeatureStore, UserRecord};
pub use gbdt::{GbdtError, TreeEnsemble, TreeNode};
pub use lstm::{LstmError, LstmPrediction, LstmState, LstmWeights};
pub use snapshot::{read_snapshot, write_snapshot, Snapshot, SnapshotError};
pub use serving::{run_server, Client, ServerConfig, ServerHandle, WireMessage};
