//! Real-time serving: Recommend and FeatureUpdate over a framed TCP
//! protocol with per-stage timing, optional micro-batching of inference and
//! a utilization-based scale-out advisory.

mod client;
mod monitor;
mod protocol;
mod server;

pub use client::{Client, ClientError, ClientReceiver, ClientSender};
pub use monitor::{BusyTracker, UtilizationMonitor, UtilizationSampler, UtilizationState};
pub use protocol::{
    frame, read_frame, read_frame_body, read_frame_len, write_frame, FrameError, MessageError,
    RecommendTiming, ServerStats, UpdateTiming, WireEvent, WireMessage, MAX_FRAME,
};
pub use server::{run_server, ServerConfig, ServerError, ServerHandle};
