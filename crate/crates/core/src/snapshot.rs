//! Engine snapshot file.
//!
//! ```text
//! magic    8 bytes  "NBOSNAP1"
//! frames   repeated { u32 BE length, payload }
//!          frame 0: JSON header (spec, models, calibration, as_of, n_users)
//!          frame 1..=n_users: binary user records, sorted by user id
//! trailer  u32 BE CRC-32 of every preceding byte
//! ```
//!
//! Record payloads are big-endian: user id, last update, LSTM state, then
//! one tagged entry per dictionary block. One-hot vectors are not stored;
//! they are recomputed from the dictionaries on restore.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde_json::{json, Value};
use thiserror::Error;

use crate::engine::{ModelError, Models};
use crate::ensemble::EnsembleModel;
use crate::features::{BlockSpec, BlockState, FeatureDictionary, FeatureSpec, FeatureStore, UserRecord};
use crate::gbdt::TreeEnsemble;
use crate::lstm::{LstmState, LstmWeights};

const MAGIC: &[u8; 8] = b"NBOSNAP1";
const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a snapshot file (bad magic)")]
    BadMagic,
    #[error("snapshot truncated")]
    Truncated,
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed snapshot: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Decoded snapshot contents.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub models: Models,
    pub as_of: Option<i64>,
    pub records: Vec<UserRecord>,
}

impl Snapshot {
    pub fn into_store(self, partitions: usize) -> (Models, FeatureStore) {
        let store = FeatureStore::from_records(
            self.models.spec.clone(),
            self.models.lstm.hidden_dim(),
            partitions,
            self.records,
        );
        (self.models, store)
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_be_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_be_bytes());
}

fn put_i64(buf: &mut Vec<u8>, v: i64) {
    buf.extend_from_slice(&v.to_be_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_bits().to_be_bytes());
}

/// Canonical binary encoding of one record.
pub(crate) fn encode_record(r: &UserRecord, buf: &mut Vec<u8>) {
    put_u32(buf, r.user_id.len() as u32);
    buf.extend_from_slice(r.user_id.as_bytes());
    put_i64(buf, r.last_update);
    put_u64(buf, r.lstm_state.steps_seen);
    put_u32(buf, r.lstm_state.h.len() as u32);
    for &v in r.lstm_state.h.iter().chain(&r.lstm_state.c) {
        put_f64(buf, v);
    }
    put_u32(buf, r.dictionary.blocks.len() as u32);
    for block in &r.dictionary.blocks {
        match block {
            BlockState::Counter { window, count } => {
                buf.push(0);
                put_u64(buf, *count);
                put_u32(buf, window.len() as u32);
                for &ts in window {
                    put_i64(buf, ts);
                }
            }
            BlockState::Favorite { counts } => {
                buf.push(1);
                put_u32(buf, counts.len() as u32);
                for (&bucket, &count) in counts {
                    put_u32(buf, bucket);
                    put_u64(buf, count);
                }
            }
            BlockState::Identity { current } => {
                buf.push(2);
                match current {
                    Some(b) => {
                        buf.push(1);
                        put_u32(buf, *b);
                    }
                    None => {
                        buf.push(0);
                        put_u32(buf, 0);
                    }
                }
            }
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SnapshotError> {
        let end = self.at.checked_add(n).ok_or(SnapshotError::Truncated)?;
        if end > self.bytes.len() {
            return Err(SnapshotError::Truncated);
        }
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, SnapshotError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, SnapshotError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, SnapshotError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn i64(&mut self) -> Result<i64, SnapshotError> {
        Ok(i64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, SnapshotError> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn done(&self) -> bool {
        self.at == self.bytes.len()
    }
}

fn decode_record(payload: &[u8], spec: &FeatureSpec, hidden_dim: usize) -> Result<UserRecord, SnapshotError> {
    let fmt = |m: String| SnapshotError::Format(m);
    let mut c = Cursor { bytes: payload, at: 0 };
    let id_len = c.u32()? as usize;
    let user_id = String::from_utf8(c.take(id_len)?.to_vec()).map_err(|e| fmt(format!("user id: {e}")))?;
    let last_update = c.i64()?;
    let steps_seen = c.u64()?;
    let n = c.u32()? as usize;
    if n != hidden_dim {
        return Err(fmt(format!("{user_id}: state dimension {n}, model has {hidden_dim}")));
    }
    let mut h = Vec::with_capacity(n);
    let mut cell = Vec::with_capacity(n);
    for _ in 0..n {
        h.push(c.f64()?);
    }
    for _ in 0..n {
        cell.push(c.f64()?);
    }
    let n_blocks = c.u32()? as usize;
    if n_blocks != spec.blocks.len() {
        return Err(fmt(format!("{user_id}: {n_blocks} blocks, spec has {}", spec.blocks.len())));
    }
    let mut blocks = Vec::with_capacity(n_blocks);
    for block_spec in &spec.blocks {
        let tag = c.u8()?;
        let state = match (tag, block_spec) {
            (0, BlockSpec::TemporalCounter { .. }) => {
                let count = c.u64()?;
                let len = c.u32()? as usize;
                let mut window = VecDeque::with_capacity(len.min(1 << 16));
                for _ in 0..len {
                    window.push_back(c.i64()?);
                }
                BlockState::Counter { window, count }
            }
            (1, BlockSpec::CategoricalFavorite { .. }) => {
                let len = c.u32()? as usize;
                let mut counts = BTreeMap::new();
                for _ in 0..len {
                    let bucket = c.u32()?;
                    counts.insert(bucket, c.u64()?);
                }
                BlockState::Favorite { counts }
            }
            (2, BlockSpec::CategoricalIdentity { .. }) => {
                let has = c.u8()?;
                let bucket = c.u32()?;
                BlockState::Identity {
                    current: (has == 1).then_some(bucket),
                }
            }
            (tag, b) => return Err(fmt(format!("{user_id}: tag {tag} does not match block {:?}", b.name()))),
        };
        blocks.push(state);
    }
    if !c.done() {
        return Err(fmt(format!("{user_id}: trailing bytes in record")));
    }
    let dictionary = FeatureDictionary { blocks };
    let onehot = dictionary.vectorize(spec);
    Ok(UserRecord {
        user_id,
        dictionary,
        onehot,
        lstm_state: LstmState {
            h,
            c: cell,
            steps_seen,
        },
        last_update,
    })
}

fn header(models: &Models, as_of: Option<i64>, n_users: usize) -> Vec<u8> {
    let parse = |s: String| -> Value { serde_json::from_str(&s).expect("model JSON is valid") };
    let value = json!({
        "format": FORMAT_VERSION,
        "as_of": as_of,
        "n_users": n_users,
        "spec": serde_json::to_value(&*models.spec).expect("spec serializes"),
        "lstm": parse(models.lstm.to_json()),
        "gbdt": parse(models.gbdt.to_json()),
        "ensemble": serde_json::to_value(&models.ensemble).expect("ensemble serializes"),
    });
    serde_json::to_vec(&value).expect("header serializes")
}

/// Serialize models and records into snapshot bytes. Deterministic for
/// identical inputs.
pub fn encode_snapshot(models: &Models, records: &[Arc<UserRecord>], as_of: Option<i64>) -> Vec<u8> {
    let mut sorted: Vec<&UserRecord> = records.iter().map(|r| r.as_ref()).collect();
    sorted.sort_by(|a, b| a.user_id.cmp(&b.user_id));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let head = header(models, as_of, sorted.len());
    put_u32(&mut out, head.len() as u32);
    out.extend_from_slice(&head);
    let mut payload = Vec::new();
    for r in sorted {
        payload.clear();
        encode_record(r, &mut payload);
        put_u32(&mut out, payload.len() as u32);
        out.extend_from_slice(&payload);
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

pub fn decode_snapshot(bytes: &[u8]) -> Result<Snapshot, SnapshotError> {
    if bytes.len() < MAGIC.len() {
        return Err(SnapshotError::Truncated);
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(SnapshotError::BadMagic);
    }
    if bytes.len() < MAGIC.len() + 4 {
        return Err(SnapshotError::Truncated);
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_be_bytes(trailer.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(SnapshotError::Checksum { stored, computed });
    }

    let mut c = Cursor {
        bytes: body,
        at: MAGIC.len(),
    };
    let head_len = c.u32()? as usize;
    let head: Value = serde_json::from_slice(c.take(head_len)?)
        .map_err(|e| SnapshotError::Format(format!("header: {e}")))?;
    let field = |name: &str| {
        head.get(name)
            .cloned()
            .ok_or_else(|| SnapshotError::Format(format!("header missing {name}")))
    };
    if field("format")?.as_u64() != Some(FORMAT_VERSION) {
        return Err(SnapshotError::Format("unsupported format version".into()));
    }
    let spec: FeatureSpec =
        serde_json::from_value(field("spec")?).map_err(|e| SnapshotError::Format(format!("spec: {e}")))?;
    let lstm = LstmWeights::from_json(&field("lstm")?.to_string()).map_err(ModelError::from)?;
    let gbdt = TreeEnsemble::from_json(&field("gbdt")?.to_string()).map_err(ModelError::from)?;
    let ensemble: EnsembleModel = serde_json::from_value(field("ensemble")?)
        .map_err(|e| SnapshotError::Format(format!("ensemble: {e}")))?;
    let as_of = field("as_of")?.as_i64();
    let n_users = field("n_users")?
        .as_u64()
        .ok_or_else(|| SnapshotError::Format("n_users".into()))? as usize;
    let models = Models::new(spec, lstm, gbdt, ensemble)?;

    let mut records = Vec::with_capacity(n_users);
    for _ in 0..n_users {
        let len = c.u32()? as usize;
        records.push(decode_record(c.take(len)?, &models.spec, models.lstm.hidden_dim())?);
    }
    if !c.done() {
        return Err(SnapshotError::Format("trailing bytes after records".into()));
    }
    Ok(Snapshot {
        models,
        as_of,
        records,
    })
}

/// Write a snapshot of `store` to `path`, via a temporary file and rename so
/// an interrupted write never leaves a partial file at `path`.
pub fn write_snapshot(
    path: impl AsRef<Path>,
    models: &Models,
    store: &FeatureStore,
    as_of: Option<i64>,
) -> Result<(), SnapshotError> {
    write_bytes(path.as_ref(), &encode_snapshot(models, &store.records(), as_of))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), SnapshotError> {
    let io = |source| SnapshotError::Io {
        path: path.display().to_string(),
        source,
    };
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

pub fn read_snapshot(path: impl AsRef<Path>) -> Result<Snapshot, SnapshotError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| SnapshotError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_snapshot(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{update_features, Event, EventType};
    use crate::gbdt::random_tree;
    use crate::lstm::random_weights;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn models() -> Models {
        let spec = FeatureSpec::default_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lstm = random_weights(&mut rng, spec.lstm_input_dim(), 5, 0.2).unwrap();
        let trees = (0..3).map(|_| random_tree(&mut rng, 3, spec.n_features(), 0.2)).collect();
        let gbdt = TreeEnsemble::new(spec.n_features(), 0.0, trees).unwrap();
        Models::new(spec, lstm, gbdt, EnsembleModel::default()).unwrap()
    }

    fn seeded_store(m: &Models, users: usize, events: usize) -> FeatureStore {
        let store = FeatureStore::new(m.spec.clone(), m.lstm.hidden_dim(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for i in 0..events {
            let user = format!("u{}", rng.gen_range(0..users));
            let e = Event {
                ts: i as i64 * 1_000,
                user_id: user.clone(),
                event_type: EventType::ALL[rng.gen_range(0..3)],
                item: format!("p{}", rng.gen_range(0..20)),
                category: format!("c{}", rng.gen_range(0..5)),
                price: rng.gen_bool(0.3).then(|| rng.gen_range(1.0..50.0)),
            };
            let rec = store.get_user(&user).record;
            store.put(update_features(&rec, &e, &m.spec, &m.lstm).unwrap());
        }
        store
    }

    #[test]
    fn round_trip_seeded_store() {
        let m = models();
        let store = seeded_store(&m, 20, 400);
        let bytes = encode_snapshot(&m, &store.records(), Some(400_000));
        let snap = decode_snapshot(&bytes).unwrap();
        assert_eq!(snap.as_of, Some(400_000));
        assert_eq!(*snap.models.lstm, *m.lstm);
        assert_eq!(*snap.models.gbdt, *m.gbdt);
        assert_eq!(snap.models.ensemble, m.ensemble);
        let (_, restored) = snap.into_store(5);
        assert_eq!(restored.len(), store.len());
        assert_eq!(restored.digest(), store.digest());
        for r in store.records() {
            assert_eq!(*restored.get_user(&r.user_id).record, *r);
        }
    }

    #[test]
    fn empty_store_round_trips() {
        let m = models();
        let store = FeatureStore::new(m.spec.clone(), m.lstm.hidden_dim(), 2);
        let snap = decode_snapshot(&encode_snapshot(&m, &store.records(), None)).unwrap();
        assert!(snap.records.is_empty());
        assert_eq!(snap.as_of, None);
    }

    #[test]
    fn truncated_and_corrupt_files_fail() {
        let m = models();
        let store = seeded_store(&m, 5, 50);
        let bytes = encode_snapshot(&m, &store.records(), Some(1));
        for cut in [0, 4, 12, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode_snapshot(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(decode_snapshot(&flipped), Err(SnapshotError::Checksum { .. })));
        let mut bad_magic = bytes;
        bad_magic[0] = b'X';
        assert!(matches!(decode_snapshot(&bad_magic), Err(SnapshotError::BadMagic)));
    }

    #[test]
    fn encoding_is_deterministic() {
        let m = models();
        let store = seeded_store(&m, 10, 100);
        let a = encode_snapshot(&m, &store.records(), Some(7));
        let b = encode_snapshot(&m, &store.records(), Some(7));
        assert_eq!(a, b);
    }

    #[test]
    fn file_round_trip() {
        let m = models();
        let store = seeded_store(&m, 4, 30);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.snap");
        write_snapshot(&path, &m, &store, Some(30_000)).unwrap();
        let snap = read_snapshot(&path).unwrap();
        assert_eq!(snap.records.len(), store.len());
        assert!(!path.with_extension("tmp").exists());
    }
}
