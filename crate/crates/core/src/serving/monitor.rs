//! Worker utilization tracking and the scale-out advisory.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

/// Accumulated busy time of one worker thread.
#[derive(Debug)]
pub struct BusyTracker {
    epoch: Instant,
    busy_ns: AtomicU64,
    /// Nanoseconds since `epoch` at which the current busy section began,
    /// plus one; 0 while idle.
    since: AtomicU64,
}

impl BusyTracker {
    pub fn new(epoch: Instant) -> Self {
        Self {
            epoch,
            busy_ns: AtomicU64::new(0),
            since: AtomicU64::new(0),
        }
    }

    fn now_ns(&self) -> u64 {
        self.epoch.elapsed().as_nanos() as u64
    }

    pub fn begin(&self) {
        self.since.store(self.now_ns() + 1, Ordering::Release);
    }

    pub fn end(&self) {
        let since = self.since.swap(0, Ordering::AcqRel);
        if since > 0 {
            let spent = self.now_ns().saturating_sub(since - 1);
            self.busy_ns.fetch_add(spent, Ordering::AcqRel);
        }
    }

    /// Busy time so far, including a section still in progress.
    pub fn busy(&self) -> u64 {
        let done = self.busy_ns.load(Ordering::Acquire);
        let since = self.since.load(Ordering::Acquire);
        if since > 0 {
            done + self.now_ns().saturating_sub(since - 1)
        } else {
            done
        }
    }
}

/// Fires once utilization has exceeded `threshold` for `consecutive`
/// periods in a row, and re-arms after a period at or below it.
#[derive(Debug, Clone)]
pub struct UtilizationMonitor {
    pub threshold: f64,
    pub consecutive: u32,
    run: u32,
    fired: bool,
}

impl UtilizationMonitor {
    pub const DEFAULT_THRESHOLD: f64 = 0.8;
    pub const DEFAULT_CONSECUTIVE: u32 = 3;

    pub fn new(threshold: f64, consecutive: u32) -> Self {
        Self {
            threshold,
            consecutive: consecutive.max(1),
            run: 0,
            fired: false,
        }
    }

    /// Feed one period's busy fraction. Returns true when the scale-out
    /// signal is raised by this reading.
    pub fn observe(&mut self, busy_fraction: f64) -> bool {
        if busy_fraction > self.threshold {
            self.run += 1;
            if self.run >= self.consecutive && !self.fired {
                self.fired = true;
                return true;
            }
        } else {
            self.run = 0;
            self.fired = false;
        }
        false
    }

    /// Whether the signal is currently raised.
    pub fn active(&self) -> bool {
        self.fired
    }
}

impl Default for UtilizationMonitor {
    fn default() -> Self {
        Self::new(Self::DEFAULT_THRESHOLD, Self::DEFAULT_CONSECUTIVE)
    }
}

/// Shared output of a running sampler.
#[derive(Debug, Default)]
pub struct UtilizationState {
    /// Busy fraction of the last period, as f64 bits.
    last: AtomicU64,
    pub scale_out: AtomicBool,
    pub signals: AtomicU64,
    pub periods: AtomicU64,
}

impl UtilizationState {
    pub fn last(&self) -> f64 {
        f64::from_bits(self.last.load(Ordering::Acquire))
    }
}

/// Background thread sampling a set of trackers every `period`.
pub struct UtilizationSampler {
    pub state: Arc<UtilizationState>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl UtilizationSampler {
    pub fn spawn(trackers: Vec<Arc<BusyTracker>>, period: Duration, mut monitor: UtilizationMonitor) -> Self {
        let state = Arc::new(UtilizationState::default());
        let stop = Arc::new(AtomicBool::new(false));
        let handle = {
            let state = state.clone();
            let stop = stop.clone();
            thread::Builder::new()
                .name("nbo-monitor".into())
                .spawn(move || {
                    let workers = trackers.len().max(1) as f64;
                    let total = |t: &[Arc<BusyTracker>]| t.iter().map(|b| b.busy()).sum::<u64>();
                    let mut prev_busy = total(&trackers);
                    let mut prev_at = Instant::now();
                    while !stop.load(Ordering::Acquire) {
                        let deadline = prev_at + period;
                        while Instant::now() < deadline {
                            if stop.load(Ordering::Acquire) {
                                return;
                            }
                            thread::sleep((deadline - Instant::now()).min(Duration::from_millis(20)));
                        }
                        let busy = total(&trackers);
                        let now = Instant::now();
                        let wall = now.duration_since(prev_at).as_nanos() as f64;
                        let frac = (busy - prev_busy) as f64 / (wall * workers);
                        prev_busy = busy;
                        prev_at = now;
                        state.last.store(frac.to_bits(), Ordering::Release);
                        state.periods.fetch_add(1, Ordering::AcqRel);
                        if monitor.observe(frac) {
                            state.signals.fetch_add(1, Ordering::AcqRel);
                            log::warn!(
                                "scale_out: worker utilization above {:.0}% for {} consecutive periods (last {:.1}%)",
                                monitor.threshold * 100.0,
                                monitor.consecutive,
                                frac * 100.0
                            );
                        }
                        state.scale_out.store(monitor.active(), Ordering::Release);
                    }
                })
                .expect("spawn monitor thread")
        };
        Self {
            state,
            stop,
            handle: Some(handle),
        }
    }

    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for UtilizationSampler {
    fn drop(&mut self) {
        self.stop();
    }
}
