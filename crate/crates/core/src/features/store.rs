//! In-memory user store, sharded by a stable hash of the user id.
//!
//! Each partition maps user ids to immutable `Arc<UserRecord>` versions.
//! Writers build a new record off-lock and swap the pointer in; readers
//! clone the current pointer and never observe a half-written record.
//! Only the worker owning a partition writes to it.

use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::RwLock;

use super::dictionary::fnv1a64;
use super::record::UserRecord;
use super::spec::FeatureSpec;

pub struct FeatureStore {
    spec: Arc<FeatureSpec>,
    hidden_dim: usize,
    partitions: Vec<RwLock<HashMap<String, Arc<UserRecord>>>>,
}

/// Result of [`FeatureStore::get_user`].
#[derive(Debug, Clone)]
pub struct Lookup {
    pub record: Arc<UserRecord>,
    /// The user was unknown; `record` is a fresh cold-start record that was
    /// not inserted.
    pub cold_start: bool,
}

/// Partition owning a user id.
pub fn partition_of(user_id: &str, partitions: usize) -> usize {
    (fnv1a64(user_id.as_bytes()) % partitions as u64) as usize
}

impl FeatureStore {
    pub fn new(spec: Arc<FeatureSpec>, hidden_dim: usize, partitions: usize) -> Self {
        let partitions = partitions.max(1);
        Self {
            spec,
            hidden_dim,
            partitions: (0..partitions).map(|_| RwLock::new(HashMap::new())).collect(),
        }
    }

    pub fn from_records(
        spec: Arc<FeatureSpec>,
        hidden_dim: usize,
        partitions: usize,
        records: impl IntoIterator<Item = UserRecord>,
    ) -> Self {
        let store = Self::new(spec, hidden_dim, partitions);
        for r in records {
            store.put(r);
        }
        store
    }

    pub fn spec(&self) -> &Arc<FeatureSpec> {
        &self.spec
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn partition_count(&self) -> usize {
        self.partitions.len()
    }

    pub fn partition_of(&self, user_id: &str) -> usize {
        partition_of(user_id, self.partitions.len())
    }

    pub fn get_user(&self, user_id: &str) -> Lookup {
        let found = self.partitions[self.partition_of(user_id)]
            .read()
            .get(user_id)
            .cloned();
        match found {
            Some(record) => Lookup {
                record,
                cold_start: false,
            },
            None => Lookup {
                record: Arc::new(UserRecord::cold_start(user_id, &self.spec, self.hidden_dim)),
                cold_start: true,
            },
        }
    }

    pub fn contains(&self, user_id: &str) -> bool {
        self.partitions[self.partition_of(user_id)]
            .read()
            .contains_key(user_id)
    }

    pub fn put(&self, record: UserRecord) {
        self.put_arc(Arc::new(record));
    }

    pub fn put_arc(&self, record: Arc<UserRecord>) {
        let p = self.partition_of(&record.user_id);
        self.partitions[p].write().insert(record.user_id.clone(), record);
    }

    pub fn len(&self) -> usize {
        self.partitions.iter().map(|p| p.read().len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn partition_len(&self, partition: usize) -> usize {
        self.partitions[partition].read().len()
    }

    /// Every record, ordered by user id.
    pub fn records(&self) -> Vec<Arc<UserRecord>> {
        let mut all: Vec<Arc<UserRecord>> = self
            .partitions
            .iter()
            .flat_map(|p| p.read().values().cloned().collect::<Vec<_>>())
            .collect();
        all.sort_by(|a, b| a.user_id.cmp(&b.user_id));
        all
    }

    /// CRC-32 over the canonical encoding of every record. Two stores with
    /// the same contents have the same digest regardless of partitioning.
    pub fn digest(&self) -> u32 {
        let mut hasher = crc32fast::Hasher::new();
        for r in self.records() {
            let mut buf = Vec::new();
            crate::snapshot::encode_record(&r, &mut buf);
            hasher.update(&buf);
        }
        hasher.finalize()
    }
}
