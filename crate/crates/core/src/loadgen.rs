//! Load-replay benchmark client.
//!
//! A single scheduler thread paces messages at the target rate and draws
//! each message's kind from a seeded Bernoulli(mix). FeatureUpdates go out
//! open-loop on connections chosen by user hash, so one user's events stay
//! ordered. Recommends are served closed-loop: each recommend connection
//! sends one request and waits for its response before taking the next.

use std::collections::HashMap;
use std::io::Write;
use std::net::{Shutdown, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use crossbeam_channel::{unbounded, Receiver};
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::{fnv1a64, Event};
use crate::metrics::percentiles;
use crate::serving::{
    Client, ClientError, ClientReceiver, RecommendTiming, ServerStats, UpdateTiming, WireEvent, WireMessage,
};

/// Allowed gap between `rl_total` and the sum of its components, in µs:
/// twice the 1 µs reporting resolution.
pub const DECOMPOSITION_TOLERANCE_US: f64 = 2.0;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid bench config: {0}")]
    Config(String),
    #[error("cannot reach server: {0}")]
    Connect(ClientError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub addr: String,
    /// Target total message rate, msg/s.
    pub rate: f64,
    /// Final rate of a linear ramp; `None` runs a single step at `rate`.
    pub ramp_to: Option<f64>,
    pub steps: usize,
    /// Fraction of messages that are FeatureUpdates.
    pub mix: f64,
    /// Duration of each rate step.
    pub duration: Duration,
    pub update_connections: usize,
    pub recommend_connections: usize,
    /// Extra time after a step's last send to collect responses.
    pub drain: Duration,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:7878".into(),
            rate: 100.0,
            ramp_to: None,
            steps: 4,
            mix: 0.8,
            duration: Duration::from_secs(10),
            update_connections: 2,
            recommend_connections: 4,
            drain: Duration::from_secs(2),
            seed: 1,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Config(m));
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return bad(format!("rate must be positive, got {}", self.rate));
        }
        if let Some(r) = self.ramp_to {
            if !(r.is_finite() && r > 0.0) {
                return bad(format!("ramp rate must be positive, got {r}"));
            }
        }
        if !(0.0..=1.0).contains(&self.mix) {
            return bad(format!("mix must be in [0, 1], got {}", self.mix));
        }
        if self.duration.is_zero() {
            return bad("duration must be positive".into());
        }
        if self.steps == 0 || self.update_connections == 0 || self.recommend_connections == 0 {
            return bad("steps and connection counts must be at least 1".into());
        }
        Ok(())
    }

    /// Target rate of every step.
    pub fn rates(&self) -> Vec<f64> {
        match self.ramp_to {
            None => vec![self.rate],
            Some(end) if self.steps == 1 => vec![end],
            Some(end) => (0..self.steps)
                .map(|i| self.rate + (end - self.rate) * i as f64 / (self.steps - 1) as f64)
                .collect(),
        }
    }
}

/// Latency percentiles in µs at p50, p90, p99; `None` without samples.
pub type Pcts = Option<[f64; 3]>;

fn pcts(values: &[f64]) -> Pcts {
    percentiles(values, &[50.0, 90.0, 99.0]).ok().map(|v| [v[0], v[1], v[2]])
}

/// One report row.
#[derive(Debug, Clone, Default)]
pub struct StepReport {
    pub step: usize,
    pub target_rate: f64,
    pub duration_s: f64,
    pub mix: f64,
    pub sent_recommend: u64,
    pub sent_update: u64,
    pub answered_recommend: u64,
    pub answered_update: u64,
    pub errors: u64,
    pub stale: u64,
    pub in_flight: u64,
    /// Scheduled but never sent before the drain deadline.
    pub not_sent: u64,
    /// Responses whose request id was not outstanding.
    pub unexpected: u64,
    pub partial: bool,
    pub recommend_throughput: f64,
    pub update_throughput: f64,
    pub client_rl: Pcts,
    pub server_rl: Pcts,
    /// Recommend stages T1, T6..T11.
    pub recommend_stages: Vec<(usize, Pcts)>,
    /// FeatureUpdate stages T1, T3, T4, T5.
    pub update_stages: Vec<(usize, Pcts)>,
    pub process_time: Pcts,
    /// Recommend responses where rl_total differs from its component sum
    /// by more than the tolerance or a component is negative.
    pub rl_mismatch: u64,
    /// Server busy fraction over the step, when stats were available.
    pub utilization: Option<f64>,
    pub scale_out: Option<bool>,
}

impl StepReport {
    pub fn sent(&self) -> u64 {
        self.sent_recommend + self.sent_update
    }

    pub fn answered(&self) -> u64 {
        self.answered_recommend + self.answered_update
    }

    /// sent = answered + errors + in_flight.
    pub fn reconciles(&self) -> bool {
        self.sent() == self.answered() + self.errors + self.in_flight
    }
}

pub fn report_header() -> Vec<String> {
    let mut h: Vec<String> = [
        "step",
        "target_rate",
        "duration_s",
        "mix",
        "sent_recommend",
        "sent_update",
        "answered_recommend",
        "answered_update",
        "errors",
        "stale",
        "in_flight",
        "not_sent",
        "unexpected",
        "partial",
        "recommend_throughput",
        "update_throughput",
        "total_throughput",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut p = |prefix: &str| {
        for q in ["p50", "p90", "p99"] {
            h.push(format!("{prefix}_{q}_us"));
        }
    };
    p("client_rl");
    p("rl_total");
    for t in [1, 6, 7, 8, 9, 10, 11] {
        p(&format!("rec_t{t}"));
    }
    for t in [1, 3, 4, 5] {
        p(&format!("upd_t{t}"));
    }
    p("process_time");
    h.extend(["rl_mismatch", "utilization", "scale_out"].iter().map(|s| s.to_string()));
    h
}

pub fn report_record(r: &StepReport) -> Vec<String> {
    let mut v = vec![
        r.step.to_string(),
        format!("{:.1}", r.target_rate),
        format!("{:.3}", r.duration_s),
        format!("{:.3}", r.mix),
        r.sent_recommend.to_string(),
        r.sent_update.to_string(),
        r.answered_recommend.to_string(),
        r.answered_update.to_string(),
        r.errors.to_string(),
        r.stale.to_string(),
        r.in_flight.to_string(),
        r.not_sent.to_string(),
        r.unexpected.to_string(),
        r.partial.to_string(),
        format!("{:.2}", r.recommend_throughput),
        format!("{:.2}", r.update_throughput),
        format!("{:.2}", r.recommend_throughput + r.update_throughput),
    ];
    let mut p = |x: &Pcts| match x {
        Some(a) => v.extend(a.iter().map(|f| format!("{f:.1}"))),
        None => v.extend(std::iter::repeat(String::new()).take(3)),
    };
    p(&r.client_rl);
    p(&r.server_rl);
    for (_, s) in &r.recommend_stages {
        p(s);
    }
    for (_, s) in &r.update_stages {
        p(s);
    }
    p(&r.process_time);
    v.push(r.rl_mismatch.to_string());
    v.push(r.utilization.map(|u| format!("{u:.4}")).unwrap_or_default());
    v.push(r.scale_out.map(|b| b.to_string()).unwrap_or_default());
    v
}

pub fn write_report<W: Write>(w: W, rows: &[StepReport]) -> Result<(), BenchError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(report_header())?;
    for r in rows {
        out.write_record(report_record(r))?;
    }
    out.flush()?;
    Ok(())
}

/// Epoch-millisecond clock that never goes backwards.
#[derive(Clone, Copy)]
struct EventClock {
    base_ms: i64,
    started: Instant,
}

impl EventClock {
    fn new() -> Self {
        let base_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as i64)
            .unwrap_or(0);
        Self {
            base_ms,
            started: Instant::now(),
        }
    }

    fn now_ms(&self) -> i64 {
        self.base_ms + self.started.elapsed().as_millis() as i64
    }
}

#[derive(Default)]
struct Samples {
    sent_recommend: u64,
    sent_update: u64,
    answered_recommend: u64,
    answered_update: u64,
    errors: u64,
    stale: u64,
    in_flight: u64,
    not_sent: u64,
    unexpected: u64,
    partial: bool,
    client_rl: Vec<f64>,
    recommend: Vec<RecommendTiming>,
    update: Vec<UpdateTiming>,
    process_time: Vec<f64>,
    rl_mismatch: u64,
}

impl Samples {
    fn merge(&mut self, o: Samples) {
        self.sent_recommend += o.sent_recommend;
        self.sent_update += o.sent_update;
        self.answered_recommend += o.answered_recommend;
        self.answered_update += o.answered_update;
        self.errors += o.errors;
        self.stale += o.stale;
        self.in_flight += o.in_flight;
        self.not_sent += o.not_sent;
        self.unexpected += o.unexpected;
        self.partial |= o.partial;
        self.client_rl.extend(o.client_rl);
        self.recommend.extend(o.recommend);
        self.update.extend(o.update);
        self.process_time.extend(o.process_time);
        self.rl_mismatch += o.rl_mismatch;
    }

    fn record_recommend(&mut self, timing: RecommendTiming, client_us: f64) {
        self.answered_recommend += 1;
        self.client_rl.push(client_us);
        let parts = [
            timing.t1, timing.t6, timing.t7, timing.t8, timing.t9, timing.t10, timing.t11,
        ];
        if parts.iter().any(|&p| p < 0.0)
            || (timing.rl_total - timing.component_sum()).abs() > DECOMPOSITION_TOLERANCE_US
        {
            self.rl_mismatch += 1;
        }
        self.recommend.push(timing);
    }
}

fn is_stale(reason: &Option<String>) -> bool {
    reason.as_deref().is_some_and(|r| r.contains("stale"))
}

enum Job {
    Update(u64, Event),
    Recommend(u64, String),
}

fn elapsed_us(since: Instant) -> f64 {
    since.elapsed().as_nanos() as f64 / 1_000.0
}

fn sleep_until(t: Instant) {
    let now = Instant::now();
    if t > now {
        thread::sleep(t - now);
    }
}

fn query_stats(addr: &str) -> Option<ServerStats> {
    let mut c = Client::connect(addr).ok()?;
    c.set_read_timeout(Some(Duration::from_secs(5))).ok()?;
    match c.call(&WireMessage::Stats { req_id: 0 }).ok()? {
        WireMessage::StatsResponse { stats, .. } => Some(stats),
        _ => None,
    }
}

/// End-of-step cutoff: once fired, every registered socket is shut down so
/// blocked readers return and outstanding requests count as in flight.
#[derive(Default)]
struct Cutoff {
    deadline: Mutex<Option<Instant>>,
    fired: AtomicBool,
    streams: Mutex<Vec<TcpStream>>,
}

impl Cutoff {
    fn register(&self, client: &Client) {
        if let Ok(s) = client.stream_clone() {
            self.streams.lock().push(s);
        }
    }

    fn passed(&self) -> bool {
        self.fired.load(Ordering::Acquire) || self.deadline.lock().is_some_and(|d| Instant::now() >= d)
    }

    fn fire(&self) {
        self.fired.store(true, Ordering::Release);
        for s in self.streams.lock().iter() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

/// Open-loop update connection: this thread sends, a reader thread matches
/// acks to outstanding request ids.
fn update_connection(addr: &str, rx: Receiver<Job>, cutoff: Arc<Cutoff>) -> Samples {
    let client = match Client::connect(addr) {
        Ok(c) => c,
        Err(e) => {
            log::warn!("update connection failed: {e}");
            return Samples {
                partial: true,
                not_sent: rx.iter().count() as u64,
                ..Samples::default()
            };
        }
    };
    cutoff.register(&client);
    let (mut tx, mut reader) = client.split();
    let outstanding: Arc<Mutex<HashMap<u64, Instant>>> = Arc::default();
    let sender_done = Arc::new(AtomicBool::new(false));

    let reader_thread = {
        let outstanding = outstanding.clone();
        let sender_done = sender_done.clone();
        let cutoff = cutoff.clone();
        thread::spawn(move || read_acks(&mut reader, &outstanding, &sender_done, &cutoff))
    };

    let mut s = Samples::default();
    for job in rx.iter() {
        let Job::Update(req_id, event) = job else { continue };
        if s.partial || cutoff.passed() {
            s.not_sent += 1;
            continue;
        }
        let msg = WireMessage::FeatureUpdate {
            req_id,
            user_id: event.user_id.clone(),
            event: WireEvent::from_event(&event),
        };
        outstanding.lock().insert(req_id, Instant::now());
        if tx.send(&msg).is_err() {
            outstanding.lock().remove(&req_id);
            s.partial = !cutoff.fired.load(Ordering::Acquire);
            s.not_sent += 1;
            continue;
        }
        s.sent_update += 1;
    }
    sender_done.store(true, Ordering::Release);
    while !reader_thread.is_finished() {
        if outstanding.lock().is_empty() {
            tx.close();
        }
        thread::sleep(Duration::from_millis(2));
    }
    s.merge(reader_thread.join().expect("reader thread"));
    s.in_flight = outstanding.lock().len() as u64;
    tx.close();
    s
}

fn read_acks(
    reader: &mut ClientReceiver,
    outstanding: &Mutex<HashMap<u64, Instant>>,
    sender_done: &AtomicBool,
    cutoff: &Cutoff,
) -> Samples {
    let mut s = Samples::default();
    let finished = || sender_done.load(Ordering::Acquire) && outstanding.lock().is_empty();
    while !finished() {
        let msg = match reader.recv() {
            Ok(m) => m,
            Err(e) => {
                if !finished() && !cutoff.fired.load(Ordering::Acquire) {
                    log::warn!("update connection lost: {e}");
                    s.partial = true;
                }
                break;
            }
        };
        let sent_at = msg.req_id().and_then(|id| outstanding.lock().remove(&id));
        if sent_at.is_none() {
            s.unexpected += 1;
            continue;
        }
        match msg {
            WireMessage::Ack {
                ok,
                process_time,
                timing,
                reason,
                ..
            } => {
                if ok {
                    s.answered_update += 1;
                    s.process_time.push(process_time);
                    s.update.push(timing);
                } else {
                    s.errors += 1;
                    if is_stale(&reason) {
                        s.stale += 1;
                    }
                }
            }
            _ => s.errors += 1,
        }
    }
    s
}

/// Closed-loop recommend connection.
fn recommend_connection(addr: &str, rx: Receiver<Job>, cutoff: Arc<Cutoff>) -> Samples {
    let mut s = Samples::default();
    let mut client = match Client::connect(addr) {
        Ok(c) => c,
        Err(e) => {
            log::warn!("recommend connection failed: {e}");
            s.partial = true;
            s.not_sent = rx.iter().count() as u64;
            return s;
        }
    };
    cutoff.register(&client);
    let mut broken = false;
    for job in rx.iter() {
        let Job::Recommend(req_id, user_id) = job else { continue };
        if broken || cutoff.passed() {
            s.not_sent += 1;
            continue;
        }
        let sent_at = Instant::now();
        let msg = WireMessage::Recommend {
            req_id,
            user_id,
            event: None,
        };
        if client.send(&msg).is_err() {
            s.partial |= !cutoff.fired.load(Ordering::Acquire);
            s.not_sent += 1;
            broken = true;
            continue;
        }
        s.sent_recommend += 1;
        loop {
            match client.recv() {
                Ok(WireMessage::RecommendResponse { req_id: r, timing, .. }) if r == req_id => {
                    s.record_recommend(timing, elapsed_us(sent_at));
                    break;
                }
                Ok(m) if m.req_id() == Some(req_id) => {
                    s.errors += 1;
                    break;
                }
                Ok(_) => s.unexpected += 1,
                Err(e) => {
                    if !cutoff.fired.load(Ordering::Acquire) {
                        log::warn!("recommend connection lost: {e}");
                        s.partial = true;
                    }
                    s.in_flight += 1;
                    broken = true;
                    break;
                }
            }
        }
    }
    s
}

/// Replays `events` cyclically, continuing from `cursor`.
pub struct EventFeed<'a> {
    events: &'a [Event],
    cursor: usize,
}

impl<'a> EventFeed<'a> {
    pub fn new(events: &'a [Event]) -> Self {
        assert!(!events.is_empty(), "event feed needs at least one event");
        Self { events, cursor: 0 }
    }

    fn next(&mut self) -> &'a Event {
        let e = &self.events[self.cursor % self.events.len()];
        self.cursor += 1;
        e
    }
}

/// Run one step at `rate` msg/s for `cfg.duration`.
pub fn run_step(cfg: &BenchConfig, step: usize, rate: f64, feed: &mut EventFeed<'_>) -> Result<StepReport, BenchError> {
    cfg.validate()?;
    // fail fast when the server is unreachable
    Client::connect(&cfg.addr).map_err(BenchError::Connect)?;
    let stats_before = query_stats(&cfg.addr);

    let cutoff: Arc<Cutoff> = Arc::default();
    let mut update_txs = Vec::with_capacity(cfg.update_connections);
    let mut handles = Vec::new();
    for _ in 0..cfg.update_connections {
        let (tx, rx) = unbounded();
        update_txs.push(tx);
        let addr = cfg.addr.clone();
        let cutoff = cutoff.clone();
        handles.push(thread::spawn(move || update_connection(&addr, rx, cutoff)));
    }
    let (rec_tx, rec_rx) = unbounded();
    for _ in 0..cfg.recommend_connections {
        let rx = rec_rx.clone();
        let addr = cfg.addr.clone();
        let cutoff = cutoff.clone();
        handles.push(thread::spawn(move || recommend_connection(&addr, rx, cutoff)));
    }
    drop(rec_rx);
    // let connections come up before the clock starts
    thread::sleep(Duration::from_millis(50));

    let clock = EventClock::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let period = Duration::from_secs_f64(1.0 / rate);
    let start = Instant::now();
    let end = start + cfg.duration;
    let mut k: u64 = 0;
    loop {
        let at = start + period.mul_f64(k as f64);
        if at >= end {
            break;
        }
        sleep_until(at);
        k += 1;
        let event = feed.next();
        if rng.gen_bool(cfg.mix) {
            let mut e = event.clone();
            e.ts = clock.now_ms();
            let conn = (fnv1a64(e.user_id.as_bytes()) % update_txs.len() as u64) as usize;
            let _ = update_txs[conn].send(Job::Update(k, e));
        } else {
            let _ = rec_tx.send(Job::Recommend(k, event.user_id.clone()));
        }
    }
    let send_phase = start.elapsed();
    let drain_until = Instant::now() + cfg.drain;
    *cutoff.deadline.lock() = Some(drain_until);
    drop(update_txs);
    drop(rec_tx);

    let all_done = Arc::new(AtomicBool::new(false));
    let watchdog = {
        let cutoff = cutoff.clone();
        let all_done = all_done.clone();
        thread::spawn(move || {
            while Instant::now() < drain_until {
                if all_done.load(Ordering::Acquire) {
                    return;
                }
                thread::sleep(Duration::from_millis(5));
            }
            cutoff.fire();
        })
    };
    let mut s = Samples::default();
    for h in handles {
        s.merge(h.join().expect("connection thread"));
    }
    all_done.store(true, Ordering::Release);
    let _ = watchdog.join();
    let stats_after = query_stats(&cfg.addr);

    let secs = send_phase.as_secs_f64();
    let stage = |f: &dyn Fn(&RecommendTiming) -> f64| pcts(&s.recommend.iter().map(f).collect::<Vec<_>>());
    let recommend_stages = vec![
        (1, stage(&|t| t.t1)),
        (6, stage(&|t| t.t6)),
        (7, stage(&|t| t.t7)),
        (8, stage(&|t| t.t8)),
        (9, stage(&|t| t.t9)),
        (10, stage(&|t| t.t10)),
        (11, stage(&|t| t.t11)),
    ];
    let ustage = |f: &dyn Fn(&UpdateTiming) -> f64| pcts(&s.update.iter().map(f).collect::<Vec<_>>());
    let update_stages = vec![
        (1, ustage(&|t| t.t1)),
        (3, ustage(&|t| t.t3)),
        (4, ustage(&|t| t.t4)),
        (5, ustage(&|t| t.t5)),
    ];
    let (utilization, scale_out) = match (&stats_before, &stats_after) {
        (Some(a), Some(b)) if b.uptime_ns > a.uptime_ns => {
            let workers = (b.partitions + b.inference_workers).max(1) as f64;
            let u = (b.busy_ns - a.busy_ns) as f64 / ((b.uptime_ns - a.uptime_ns) as f64 * workers);
            (Some(u), Some(b.scale_out))
        }
        _ => (None, None),
    };
    let server_rl: Vec<f64> = s.recommend.iter().map(|t| t.rl_total).collect();
    Ok(StepReport {
        step,
        target_rate: rate,
        duration_s: secs,
        mix: cfg.mix,
        sent_recommend: s.sent_recommend,
        sent_update: s.sent_update,
        answered_recommend: s.answered_recommend,
        answered_update: s.answered_update,
        errors: s.errors,
        stale: s.stale,
        in_flight: s.in_flight,
        not_sent: s.not_sent,
        unexpected: s.unexpected,
        partial: s.partial,
        recommend_throughput: s.answered_recommend as f64 / secs,
        update_throughput: s.answered_update as f64 / secs,
        client_rl: pcts(&s.client_rl),
        server_rl: pcts(&server_rl),
        recommend_stages,
        update_stages,
        process_time: pcts(&s.process_time),
        rl_mismatch: s.rl_mismatch,
        utilization,
        scale_out,
    })
}

/// Run every rate step of `cfg` in order.
pub fn run_bench(cfg: &BenchConfig, events: &[Event]) -> Result<Vec<StepReport>, BenchError> {
    cfg.validate()?;
    let mut feed = EventFeed::new(events);
    let mut rows = Vec::new();
    for (i, rate) in cfg.rates().into_iter().enumerate() {
        let row = run_step(cfg, i, rate, &mut feed)?;
        log::info!(
            "step {i}: target {rate:.0} msg/s, recommend {:.1}/s, update {:.1}/s, rl p90 {:?} us",
            row.recommend_throughput,
            row.update_throughput,
            row.server_rl.map(|p| p[1])
        );
        rows.push(row);
    }
    Ok(rows)
}

/// Replay `events` over one connection as FeatureUpdates, requesting a
/// recommendation for the event's user after every `recommend_every`-th
/// event. Returns (user, score) in request order.
pub fn replay_scores(
    addr: &str,
    events: &[Event],
    recommend_every: usize,
) -> Result<Vec<(String, f64)>, ClientError> {
    let client = Client::connect(addr)?;
    let (mut tx, mut rx) = client.split();
    let mut requests: Vec<(u64, String)> = Vec::new();
    let mut req_id = 0u64;
    let mut frames = Vec::new();
    for (i, e) in events.iter().enumerate() {
        req_id += 1;
        frames.push(
            WireMessage::FeatureUpdate {
                req_id,
                user_id: e.user_id.clone(),
                event: WireEvent::from_event(e),
            }
            .to_frame(),
        );
        if recommend_every > 0 && (i + 1) % recommend_every == 0 {
            req_id += 1;
            requests.push((req_id, e.user_id.clone()));
            frames.push(
                WireMessage::Recommend {
                    req_id,
                    user_id: e.user_id.clone(),
                    event: None,
                }
                .to_frame(),
            );
        }
    }
    let expected = req_id as usize;
    let sender = thread::spawn(move || -> Result<(), ClientError> {
        for f in frames {
            tx.send_raw(&f)?;
        }
        Ok(())
    });
    let mut scores: HashMap<u64, f64> = HashMap::new();
    for _ in 0..expected {
        match rx.recv()? {
            WireMessage::RecommendResponse { req_id, score, .. } => {
                scores.insert(req_id, score);
            }
            WireMessage::Ack { .. } => {}
            other => log::warn!("replay: unexpected {other:?}"),
        }
    }
    sender.join().expect("sender thread")?;
    Ok(requests
        .into_iter()
        .map(|(id, user)| (user, scores.get(&id).copied().unwrap_or(f64::NAN)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_rates() {
        let cfg = BenchConfig {
            rate: 100.0,
            ramp_to: Some(1000.0),
            steps: 4,
            ..BenchConfig::default()
        };
        assert_eq!(cfg.rates(), vec![100.0, 400.0, 700.0, 1000.0]);
        assert_eq!(BenchConfig::default().rates(), vec![100.0]);
    }

    #[test]
    fn config_validation() {
        assert!(BenchConfig { mix: 1.2, ..BenchConfig::default() }.validate().is_err());
        assert!(BenchConfig { rate: 0.0, ..BenchConfig::default() }.validate().is_err());
        assert!(BenchConfig::default().validate().is_ok());
    }

    #[test]
    fn header_and_record_align() {
        let row = StepReport {
            recommend_stages: [1, 6, 7, 8, 9, 10, 11].iter().map(|&t| (t, None)).collect(),
            update_stages: [1, 3, 4, 5].iter().map(|&t| (t, Some([1.0, 2.0, 3.0]))).collect(),
            ..StepReport::default()
        };
        assert_eq!(report_header().len(), report_record(&row).len());
    }
}
