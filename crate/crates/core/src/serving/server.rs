//! TCP server: one acceptor, a reader and a writer thread per connection,
//! P single-writer partition workers for feature updates and M
//! single-threaded inference workers for recommends.

use std::collections::HashMap;
use std::io::{BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};
use parking_lot::{Condvar, Mutex};
use thiserror::Error;

use crate::engine::{Models, PreparedInput};
use crate::features::{update_features, Event, FeatureError, FeatureStore};

use super::monitor::{BusyTracker, UtilizationMonitor, UtilizationSampler};
use super::protocol::{
    read_frame_body, read_frame_len, FrameError, RecommendTiming, ServerStats, UpdateTiming, WireMessage,
    MAX_FRAME,
};

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub listen: String,
    pub partitions: usize,
    pub inference_workers: usize,
    /// Micro-batch collection window; 0 disables batching.
    pub batch_window_us: u64,
    pub max_batch: usize,
    pub pin_workers: bool,
    pub max_frame: usize,
    pub monitor_period: Duration,
    pub monitor_threshold: f64,
    pub monitor_consecutive: u32,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:0".into(),
            partitions: 2,
            inference_workers: 2,
            batch_window_us: 0,
            max_batch: 64,
            pin_workers: false,
            max_frame: MAX_FRAME,
            monitor_period: Duration::from_secs(1),
            monitor_threshold: UtilizationMonitor::DEFAULT_THRESHOLD,
            monitor_consecutive: UtilizationMonitor::DEFAULT_CONSECUTIVE,
        }
    }
}

impl ServerConfig {
    /// Single partition worker, single inference worker, no batching.
    pub fn single_threaded() -> Self {
        Self {
            partitions: 1,
            inference_workers: 1,
            batch_window_us: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ServerError> {
        let bad = |m: &str| Err(ServerError::Config(m.to_string()));
        if self.partitions == 0 {
            return bad("partitions must be at least 1");
        }
        if self.inference_workers == 0 {
            return bad("inference workers must be at least 1");
        }
        if self.max_batch == 0 {
            return bad("max batch must be at least 1");
        }
        if self.max_frame < 16 {
            return bad("max frame is too small");
        }
        if self.monitor_period.is_zero() {
            return bad("monitor period must be positive");
        }
        if !(self.monitor_threshold.is_finite() && self.monitor_threshold > 0.0) {
            return bad("monitor threshold must be a positive number");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("invalid server config: {0}")]
    Config(String),
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-connection count of submitted and applied feature updates, so a
/// recommend sees every update sent before it on the same connection.
#[derive(Default)]
struct Session {
    counts: Mutex<(u64, u64)>,
    applied: Condvar,
}

impl Session {
    fn submit(&self) {
        self.counts.lock().0 += 1;
    }

    fn mark_applied(&self) {
        self.counts.lock().1 += 1;
        self.applied.notify_all();
    }

    fn wait_for_updates(&self) {
        let mut c = self.counts.lock();
        while c.1 < c.0 {
            self.applied.wait(&mut c);
        }
    }
}

struct UpdateJob {
    req_id: u64,
    event: Event,
    t0: Instant,
    t1: Instant,
    session: Arc<Session>,
    reply: Sender<Vec<u8>>,
}

struct InferJob {
    req_id: u64,
    cold_start: bool,
    input: PreparedInput,
    /// Frame start, parsed, ordered/enqueued, prepared.
    t0: Instant,
    t1: Instant,
    t6: Instant,
    t7: Instant,
    reply: Sender<Vec<u8>>,
}

#[derive(Default)]
struct Counters {
    recommends: AtomicU64,
    updates: AtomicU64,
    stale: AtomicU64,
    batches: AtomicU64,
    max_batch: AtomicU64,
}

struct Shared {
    models: Models,
    store: FeatureStore,
    config: ServerConfig,
    epoch: Instant,
    counters: Counters,
    trackers: Vec<Arc<BusyTracker>>,
    sampler: Mutex<Option<UtilizationSampler>>,
}

struct Dispatch {
    updates: Vec<Sender<UpdateJob>>,
    inference: Sender<InferJob>,
}

fn us(from: Instant, to: Instant) -> f64 {
    to.saturating_duration_since(from).as_nanos() as f64 / 1_000.0
}

impl Shared {
    fn stats(&self) -> ServerStats {
        let c = &self.counters;
        let (utilization, scale_out, scale_out_signals) = match &*self.sampler.lock() {
            Some(s) => (
                s.state.last(),
                s.state.scale_out.load(Ordering::Acquire),
                s.state.signals.load(Ordering::Acquire),
            ),
            None => (0.0, false, 0),
        };
        ServerStats {
            partitions: self.config.partitions,
            inference_workers: self.config.inference_workers,
            batch_window_us: self.config.batch_window_us,
            recommends: c.recommends.load(Ordering::Acquire),
            updates: c.updates.load(Ordering::Acquire),
            stale: c.stale.load(Ordering::Acquire),
            batches: c.batches.load(Ordering::Acquire),
            max_batch: c.max_batch.load(Ordering::Acquire),
            busy_ns: self.trackers.iter().map(|t| t.busy()).sum(),
            uptime_ns: self.epoch.elapsed().as_nanos() as u64,
            utilization,
            scale_out,
            scale_out_signals,
            store_users: self.store.len(),
            store_digest: self.store.digest(),
        }
    }
}

/// A running server. Dropping the handle shuts it down.
pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    stopping: Arc<AtomicBool>,
    dispatch: Option<Arc<Dispatch>>,
    acceptor: Option<JoinHandle<()>>,
    connections: Arc<Mutex<ConnRegistry>>,
    workers: Vec<JoinHandle<()>>,
}

#[derive(Default)]
struct ConnRegistry {
    next_id: u64,
    streams: HashMap<u64, TcpStream>,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> ServerStats {
        self.shared.stats()
    }

    pub fn store(&self) -> &FeatureStore {
        &self.shared.store
    }

    pub fn models(&self) -> &Models {
        &self.shared.models
    }

    /// Stop accepting, close every connection for reading, let queued work
    /// drain, then join all threads.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if self.stopping.swap(true, Ordering::AcqRel) {
            return;
        }
        let mut wake = self.addr;
        if wake.ip().is_unspecified() {
            wake.set_ip(if wake.is_ipv4() {
                std::net::Ipv4Addr::LOCALHOST.into()
            } else {
                std::net::Ipv6Addr::LOCALHOST.into()
            });
        }
        let _ = TcpStream::connect_timeout(&wake, Duration::from_secs(1));
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
        let threads = {
            let mut reg = self.connections.lock();
            for s in reg.streams.values() {
                let _ = s.shutdown(Shutdown::Read);
            }
            std::mem::take(&mut reg.threads)
        };
        // readers exit on EOF; writers once every reply sender is gone
        self.dispatch.take();
        for h in threads {
            let _ = h.join();
        }
        for h in self.workers.drain(..) {
            let _ = h.join();
        }
        if let Some(mut s) = self.shared.sampler.lock().take() {
            s.stop();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

fn pin(core: Option<core_affinity::CoreId>) {
    if let Some(id) = core {
        if !core_affinity::set_for_current(id) {
            log::warn!("could not pin worker to core {}", id.id);
        }
    }
}

/// Bind `config.listen` and start serving `store` with `models`. The store
/// is re-sharded if its partition count differs from `config.partitions`.
pub fn run_server(config: ServerConfig, models: Models, store: FeatureStore) -> Result<ServerHandle, ServerError> {
    config.validate()?;
    if store.hidden_dim() != models.lstm.hidden_dim() {
        return Err(ServerError::Config(format!(
            "store holds LSTM states of size {}, model expects {}",
            store.hidden_dim(),
            models.lstm.hidden_dim()
        )));
    }
    let store = if store.partition_count() == config.partitions {
        store
    } else {
        let records = store.records().into_iter().map(|r| (*r).clone());
        FeatureStore::from_records(store.spec().clone(), store.hidden_dim(), config.partitions, records)
    };

    let addrs: Vec<SocketAddr> = config
        .listen
        .to_socket_addrs()
        .map_err(|source| ServerError::Bind {
            addr: config.listen.clone(),
            source,
        })?
        .collect();
    let listener = TcpListener::bind(&addrs[..]).map_err(|source| ServerError::Bind {
        addr: config.listen.clone(),
        source,
    })?;
    let addr = listener.local_addr()?;

    let epoch = Instant::now();
    let n_workers = config.partitions + config.inference_workers;
    let trackers: Vec<Arc<BusyTracker>> = (0..n_workers).map(|_| Arc::new(BusyTracker::new(epoch))).collect();
    let cores = if config.pin_workers {
        core_affinity::get_core_ids().unwrap_or_default()
    } else {
        Vec::new()
    };
    let core_for = |i: usize| (!cores.is_empty()).then(|| cores[i % cores.len()]);

    let shared = Arc::new(Shared {
        models,
        store,
        config: config.clone(),
        epoch,
        counters: Counters::default(),
        trackers: trackers.clone(),
        sampler: Mutex::new(None),
    });

    let mut workers = Vec::with_capacity(n_workers);
    let mut update_txs = Vec::with_capacity(config.partitions);
    for p in 0..config.partitions {
        let (tx, rx) = unbounded();
        update_txs.push(tx);
        let shared = shared.clone();
        let tracker = trackers[p].clone();
        let core = core_for(p);
        workers.push(
            thread::Builder::new()
                .name(format!("nbo-partition-{p}"))
                .spawn(move || {
                    pin(core);
                    partition_worker(&shared, &tracker, rx)
                })?,
        );
    }
    let (infer_tx, infer_rx) = unbounded();
    for m in 0..config.inference_workers {
        let shared = shared.clone();
        let tracker = trackers[config.partitions + m].clone();
        let rx = infer_rx.clone();
        let core = core_for(config.partitions + m);
        workers.push(
            thread::Builder::new()
                .name(format!("nbo-inference-{m}"))
                .spawn(move || {
                    pin(core);
                    inference_worker(&shared, &tracker, rx)
                })?,
        );
    }
    drop(infer_rx);

    *shared.sampler.lock() = Some(UtilizationSampler::spawn(
        trackers,
        config.monitor_period,
        UtilizationMonitor::new(config.monitor_threshold, config.monitor_consecutive),
    ));

    let dispatch = Arc::new(Dispatch {
        updates: update_txs,
        inference: infer_tx,
    });
    let stopping = Arc::new(AtomicBool::new(false));
    let connections = Arc::new(Mutex::new(ConnRegistry::default()));
    let acceptor = {
        let shared = shared.clone();
        let dispatch = dispatch.clone();
        let stopping = stopping.clone();
        let connections = connections.clone();
        thread::Builder::new()
            .name("nbo-acceptor".into())
            .spawn(move || accept_loop(listener, shared, dispatch, stopping, connections))?
    };

    log::info!(
        "serving on {addr}: {} partitions, {} inference workers, batch window {} us",
        config.partitions,
        config.inference_workers,
        config.batch_window_us
    );
    Ok(ServerHandle {
        addr,
        shared,
        stopping,
        dispatch: Some(dispatch),
        acceptor: Some(acceptor),
        connections,
        workers,
    })
}

fn accept_loop(
    listener: TcpListener,
    shared: Arc<Shared>,
    dispatch: Arc<Dispatch>,
    stopping: Arc<AtomicBool>,
    connections: Arc<Mutex<ConnRegistry>>,
) {
    for stream in listener.incoming() {
        if stopping.load(Ordering::Acquire) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        if let Err(e) = start_connection(stream, &shared, &dispatch, &connections) {
            log::warn!("could not start connection: {e}");
        }
    }
}

fn start_connection(
    stream: TcpStream,
    shared: &Arc<Shared>,
    dispatch: &Arc<Dispatch>,
    connections: &Arc<Mutex<ConnRegistry>>,
) -> std::io::Result<()> {
    stream.set_nodelay(true)?;
    let write_half = stream.try_clone()?;
    let registry_copy = stream.try_clone()?;
    let (reply_tx, reply_rx) = unbounded::<Vec<u8>>();

    let mut reg = connections.lock();
    reg.threads.retain(|h| !h.is_finished());
    let id = reg.next_id;
    reg.next_id += 1;
    reg.streams.insert(id, registry_copy);

    let writer = thread::Builder::new()
        .name(format!("nbo-conn-{id}-w"))
        .spawn(move || writer_loop(write_half, reply_rx))?;
    let reader = {
        let shared = shared.clone();
        let dispatch = dispatch.clone();
        let connections = connections.clone();
        thread::Builder::new().name(format!("nbo-conn-{id}-r")).spawn(move || {
            reader_loop(stream, &shared, &dispatch, reply_tx);
            connections.lock().streams.remove(&id);
        })?
    };
    reg.threads.push(writer);
    reg.threads.push(reader);
    Ok(())
}

fn writer_loop(mut stream: TcpStream, rx: Receiver<Vec<u8>>) {
    for frame in rx {
        if let Err(e) = stream.write_all(&frame) {
            log::debug!("connection write failed: {e}");
            break;
        }
    }
    let _ = stream.shutdown(Shutdown::Write);
}

fn send_error(reply: &Sender<Vec<u8>>, req_id: Option<u64>, message: String) {
    let _ = reply.send(WireMessage::Error { req_id, message }.to_frame());
}

fn reader_loop(stream: TcpStream, shared: &Shared, dispatch: &Dispatch, reply: Sender<Vec<u8>>) {
    let session = Arc::new(Session::default());
    let mut input = BufReader::new(stream);
    loop {
        let len = match read_frame_len(&mut input, shared.config.max_frame) {
            Ok(Some(len)) => len,
            Ok(None) => break,
            Err(e @ FrameError::Oversize { .. }) => {
                send_error(&reply, None, e.to_string());
                break;
            }
            Err(e) => {
                log::debug!("connection read failed: {e}");
                break;
            }
        };
        let t0 = Instant::now();
        let body = match read_frame_body(&mut input, len) {
            Ok(b) => b,
            Err(e) => {
                log::debug!("connection read failed: {e}");
                break;
            }
        };
        let msg = WireMessage::from_json(&body);
        let t1 = Instant::now();
        match msg {
            Err(e) => send_error(&reply, e.req_id(), e.to_string()),
            Ok(WireMessage::FeatureUpdate { req_id, user_id, event }) => {
                let event = event.into_event(user_id);
                let p = shared.store.partition_of(&event.user_id);
                session.submit();
                let job = UpdateJob {
                    req_id,
                    event,
                    t0,
                    t1,
                    session: session.clone(),
                    reply: reply.clone(),
                };
                if dispatch.updates[p].send(job).is_err() {
                    session.mark_applied();
                    send_error(&reply, Some(req_id), "server shutting down".into());
                }
            }
            Ok(WireMessage::Recommend { req_id, user_id, .. }) => {
                session.wait_for_updates();
                let t6 = Instant::now();
                let lookup = shared.store.get_user(&user_id);
                let input = shared.models.prepare(&lookup.record);
                let t7 = Instant::now();
                let job = InferJob {
                    req_id,
                    cold_start: lookup.cold_start,
                    input,
                    t0,
                    t1,
                    t6,
                    t7,
                    reply: reply.clone(),
                };
                if dispatch.inference.send(job).is_err() {
                    send_error(&reply, Some(req_id), "server shutting down".into());
                }
            }
            Ok(WireMessage::Stats { req_id }) => {
                session.wait_for_updates();
                let stats = shared.stats();
                let _ = reply.send(WireMessage::StatsResponse { req_id, stats }.to_frame());
            }
            Ok(other) => send_error(
                &reply,
                other.req_id(),
                format!("unexpected message kind {:?}", other.kind()),
            ),
        }
    }
}

fn partition_worker(shared: &Shared, tracker: &BusyTracker, rx: Receiver<UpdateJob>) {
    for job in rx {
        let t3 = Instant::now();
        tracker.begin();
        let current = shared.store.get_user(&job.event.user_id).record;
        let updated = update_features(&current, &job.event, &shared.models.spec, &shared.models.lstm);
        let t4 = Instant::now();
        let (ok, reason, t5) = match updated {
            Ok(record) => {
                shared.store.put(record);
                (true, None, Instant::now())
            }
            Err(e) => {
                if matches!(e, FeatureError::Stale { .. }) {
                    shared.counters.stale.fetch_add(1, Ordering::AcqRel);
                }
                (false, Some(e.to_string()), t4)
            }
        };
        shared.counters.updates.fetch_add(1, Ordering::AcqRel);
        job.session.mark_applied();
        let timing = UpdateTiming {
            t1: us(job.t0, job.t1),
            t3: us(job.t1, t3),
            t4: us(t3, t4),
            t5: us(t4, t5),
        };
        let ack = WireMessage::Ack {
            req_id: job.req_id,
            ok,
            process_time: us(job.t0, t5),
            timing,
            reason,
        };
        let _ = job.reply.send(ack.to_frame());
        tracker.end();
    }
}

fn inference_worker(shared: &Shared, tracker: &BusyTracker, rx: Receiver<InferJob>) {
    let window = Duration::from_micros(shared.config.batch_window_us);
    let max_batch = shared.config.max_batch;
    let mut batch: Vec<(InferJob, Instant)> = Vec::with_capacity(max_batch);
    while let Ok(first) = rx.recv() {
        let first_at = Instant::now();
        batch.push((first, first_at));
        if !window.is_zero() {
            let deadline = first_at + window;
            while batch.len() < max_batch {
                match rx.recv_deadline(deadline) {
                    Ok(job) => batch.push((job, Instant::now())),
                    Err(_) => break,
                }
            }
        }
        let t9 = Instant::now();
        tracker.begin();
        let size = batch.len() as u64;
        for (job, dequeued) in batch.drain(..) {
            let scored = shared.models.infer(&job.input);
            let t10 = Instant::now();
            let frame = match scored {
                Ok(p) => {
                    let mut timing = RecommendTiming {
                        t1: us(job.t0, job.t1),
                        t6: us(job.t1, job.t6),
                        t7: us(job.t6, job.t7),
                        t8: us(job.t7, dequeued),
                        t9: us(dequeued, t9),
                        t10: us(t9, t10),
                        ..RecommendTiming::default()
                    };
                    let mut msg = WireMessage::RecommendResponse {
                        req_id: job.req_id,
                        score: p.score,
                        p_gbdt: p.p_gbdt,
                        p_lstm: p.p_lstm,
                        decision: p.decision,
                        cold_start: job.cold_start,
                        timing,
                    };
                    let _ = msg.to_frame();
                    let t11 = Instant::now();
                    timing.t11 = us(t10, t11);
                    timing.rl_total = us(job.t0, t11);
                    if let WireMessage::RecommendResponse { timing: t, .. } = &mut msg {
                        *t = timing;
                    }
                    msg.to_frame()
                }
                Err(e) => WireMessage::Error {
                    req_id: Some(job.req_id),
                    message: e.to_string(),
                }
                .to_frame(),
            };
            let _ = job.reply.send(frame);
        }
        tracker.end();
        let c = &shared.counters;
        c.recommends.fetch_add(size, Ordering::AcqRel);
        c.batches.fetch_add(1, Ordering::AcqRel);
        c.max_batch.fetch_max(size, Ordering::AcqRel);
    }
}
