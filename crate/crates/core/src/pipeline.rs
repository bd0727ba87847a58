//! Startup pipeline: load models, build every user record from the
//! transaction history, calibrate the ensemble on a time-split holdout and
//! write a snapshot.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::engine::Models;
use crate::ensemble::{calibrate, EnsembleModel, DEFAULT_THRESHOLD_STEP, DEFAULT_WEIGHT_STEP};
use crate::features::{
    build_lstm_states, build_pass1, build_pass2, build_records, read_events_file, Event, EventType,
    FeatureSpec, UserRecord,
};
use crate::gbdt::TreeEnsemble;
use crate::lstm::LstmWeights;
use crate::snapshot::{encode_snapshot, write_bytes};

#[derive(Debug, Error)]
#[error("{stage}: {message}")]
pub struct StartupError {
    pub stage: &'static str,
    pub message: String,
}

fn stage<E: std::fmt::Display>(stage: &'static str) -> impl FnOnce(E) -> StartupError {
    move |e| StartupError {
        stage,
        message: e.to_string(),
    }
}

#[derive(Debug, Clone)]
pub struct StartupPaths {
    pub transactions: PathBuf,
    pub spec: PathBuf,
    pub lstm: PathBuf,
    pub gbdt: PathBuf,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Calibration {
    Calibrated {
        holdout_users: usize,
        positives: usize,
        cutoff: i64,
    },
    Skipped(String),
}

#[derive(Debug, Clone)]
pub struct StartupReport {
    pub n_events: usize,
    pub n_users: usize,
    pub as_of: Option<i64>,
    /// Feature build: both dictionary passes.
    pub t0: Duration,
    /// LSTM warm-up, model load and calibration.
    pub t2: Duration,
    pub ensemble: EnsembleModel,
    pub calibration: Calibration,
    pub snapshot_bytes: usize,
}

/// Output of [`build_engine`].
pub struct BuiltEngine {
    pub models: Models,
    pub records: Vec<UserRecord>,
    pub as_of: Option<i64>,
    pub calibration: Calibration,
    pub t0: Duration,
    /// Warm-up and calibration only; model loading is timed by the caller.
    pub t2: Duration,
}

/// Holdout for calibration: features as of a cutoff at 80% of the covered
/// time span; a user is positive when they order after the cutoff.
fn holdout(
    events: &[Event],
    models: &Models,
) -> Result<Result<(Vec<f64>, Vec<f64>, Vec<bool>, i64), String>, StartupError> {
    let (first, last) = match (events.first(), events.last()) {
        (Some(f), Some(l)) => (f.ts, l.ts),
        _ => return Ok(Err("no transactions".into())),
    };
    if first == last {
        return Ok(Err("all transactions share one timestamp".into()));
    }
    let cutoff = first + ((last as i128 - first as i128) * 4 / 5) as i64;
    let split = events.partition_point(|e| e.ts <= cutoff);
    let (before, after) = events.split_at(split);
    let records =
        build_records(before, &models.spec, &models.lstm, cutoff).map_err(stage("building holdout features"))?;
    let buyers: HashSet<&str> = after
        .iter()
        .filter(|e| e.event_type == EventType::Order)
        .map(|e| e.user_id.as_str())
        .collect();
    let mut p_gbdt = Vec::with_capacity(records.len());
    let mut p_lstm = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for r in &records {
        let (g, l) = models
            .model_probabilities(&models.prepare(r))
            .map_err(stage("scoring holdout"))?;
        p_gbdt.push(g);
        p_lstm.push(l);
        labels.push(buyers.contains(r.user_id.as_str()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Ok(Err(format!(
            "holdout of {} users has a single class ({} positive)",
            labels.len(),
            positives
        )));
    }
    Ok(Ok((p_gbdt, p_lstm, labels, cutoff)))
}

/// Build records and calibrate the ensemble from clock-sorted events.
pub fn build_engine(
    events: &[Event],
    spec: FeatureSpec,
    lstm: LstmWeights,
    gbdt: TreeEnsemble,
) -> Result<BuiltEngine, StartupError> {
    let mut models =
        Models::new(spec, lstm, gbdt, EnsembleModel::default()).map_err(stage("checking models"))?;
    let as_of = events.last().map(|e| e.ts);

    let started = Instant::now();
    let dicts = build_pass1(events, &models.spec, as_of.unwrap_or(0)).map_err(stage("building features"))?;
    let onehots = build_pass2(&dicts, &models.spec).map_err(stage("building features"))?;
    let t0 = started.elapsed();

    let started = Instant::now();
    let mut states = build_lstm_states(events, &models.spec, &models.lstm).map_err(stage("warming LSTM states"))?;
    let records: Vec<UserRecord> = dicts
        .into_iter()
        .zip(onehots)
        .map(|((user_id, dictionary), (_, onehot))| {
            let lstm_state = states.remove(&user_id).expect("every user has a sequence");
            UserRecord {
                user_id,
                dictionary,
                onehot,
                lstm_state,
                last_update: as_of.expect("users imply events"),
            }
        })
        .collect();

    let calibration = match holdout(events, &models)? {
        Ok((p_gbdt, p_lstm, labels, cutoff)) => {
            models.ensemble = calibrate(&p_gbdt, &p_lstm, &labels, DEFAULT_WEIGHT_STEP, DEFAULT_THRESHOLD_STEP)
                .map_err(stage("calibrating"))?;
            Calibration::Calibrated {
                holdout_users: labels.len(),
                positives: labels.iter().filter(|&&l| l).count(),
                cutoff,
            }
        }
        Err(reason) => {
            log::warn!("calibration skipped: {reason}; using w = 0.5, tau = 0.5");
            Calibration::Skipped(reason)
        }
    };
    let t2 = started.elapsed();

    Ok(BuiltEngine {
        models,
        records,
        as_of,
        calibration,
        t0,
        t2,
    })
}

/// Run the whole startup pipeline from files and write the snapshot.
pub fn cmd_startup(paths: &StartupPaths) -> Result<StartupReport, StartupError> {
    let events = read_events_file(&paths.transactions).map_err(stage("reading transactions"))?;
    let spec = FeatureSpec::load(&paths.spec).map_err(stage("loading feature spec"))?;

    let load_started = Instant::now();
    let lstm = LstmWeights::load(&paths.lstm).map_err(stage("loading LSTM model"))?;
    let gbdt = TreeEnsemble::load(&paths.gbdt).map_err(stage("loading tree model"))?;
    let load_time = load_started.elapsed();

    let built = build_engine(&events, spec, lstm, gbdt)?;
    let records: Vec<_> = built.records.into_iter().map(std::sync::Arc::new).collect();
    let bytes = encode_snapshot(&built.models, &records, built.as_of);
    write_snapshot_bytes(&paths.out, &bytes)?;
    Ok(StartupReport {
        n_events: events.len(),
        n_users: records.len(),
        as_of: built.as_of,
        t0: built.t0,
        t2: built.t2 + load_time,
        ensemble: built.models.ensemble,
        calibration: built.calibration,
        snapshot_bytes: bytes.len(),
    })
}

fn write_snapshot_bytes(path: &Path, bytes: &[u8]) -> Result<(), StartupError> {
    write_bytes(path, bytes).map_err(stage("writing snapshot"))
}
