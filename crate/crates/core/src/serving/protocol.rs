//! Wire protocol: a 4-byte big-endian length prefix followed by a UTF-8
//! JSON body tagged by `kind`.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::features::{Event, EventType};

/// Largest accepted frame body.
pub const MAX_FRAME: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame of {len} bytes exceeds the {max} byte limit")]
    Oversize { len: usize, max: usize },
    #[error("connection closed mid-frame")]
    Truncated,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum MessageError {
    #[error("malformed JSON: {0}")]
    Json(String),
    #[error("invalid message: {message}")]
    Invalid { req_id: Option<u64>, message: String },
}

impl MessageError {
    pub fn req_id(&self) -> Option<u64> {
        match self {
            MessageError::Json(_) => None,
            MessageError::Invalid { req_id, .. } => *req_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireEvent {
    pub ts: i64,
    #[serde(rename = "type")]
    pub event_type: EventType,
    pub item: String,
    pub category: String,
    #[serde(default)]
    pub price: Option<f64>,
}

impl WireEvent {
    pub fn from_event(e: &Event) -> Self {
        Self {
            ts: e.ts,
            event_type: e.event_type,
            item: e.item.clone(),
            category: e.category.clone(),
            price: e.price,
        }
    }

    pub fn into_event(self, user_id: String) -> Event {
        Event {
            ts: self.ts,
            user_id,
            event_type: self.event_type,
            item: self.item,
            category: self.category,
            price: self.price,
        }
    }
}

/// Recommend-path stage durations in microseconds. Stages that do not
/// occur on this path (T2..T5) are reported as 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RecommendTiming {
    #[serde(rename = "T1")]
    pub t1: f64,
    #[serde(rename = "T2")]
    pub t2: f64,
    #[serde(rename = "T3")]
    pub t3: f64,
    #[serde(rename = "T4")]
    pub t4: f64,
    #[serde(rename = "T5")]
    pub t5: f64,
    #[serde(rename = "T6")]
    pub t6: f64,
    #[serde(rename = "T7")]
    pub t7: f64,
    #[serde(rename = "T8")]
    pub t8: f64,
    #[serde(rename = "T9")]
    pub t9: f64,
    #[serde(rename = "T10")]
    pub t10: f64,
    #[serde(rename = "T11")]
    pub t11: f64,
    pub rl_total: f64,
}

impl RecommendTiming {
    /// T1 + T6 + T7 + T8 + T9 + T10 + T11.
    pub fn component_sum(&self) -> f64 {
        self.t1 + self.t6 + self.t7 + self.t8 + self.t9 + self.t10 + self.t11
    }

    pub fn stage(&self, i: usize) -> f64 {
        [
            self.t1, self.t2, self.t3, self.t4, self.t5, self.t6, self.t7, self.t8, self.t9,
            self.t10, self.t11,
        ][i - 1]
    }
}

/// FeatureUpdate-path stage durations in microseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateTiming {
    #[serde(rename = "T1")]
    pub t1: f64,
    #[serde(rename = "T3")]
    pub t3: f64,
    #[serde(rename = "T4")]
    pub t4: f64,
    #[serde(rename = "T5")]
    pub t5: f64,
}

impl UpdateTiming {
    pub fn component_sum(&self) -> f64 {
        self.t1 + self.t3 + self.t4 + self.t5
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ServerStats {
    pub partitions: usize,
    pub inference_workers: usize,
    pub batch_window_us: u64,
    pub recommends: u64,
    pub updates: u64,
    pub stale: u64,
    pub batches: u64,
    pub max_batch: u64,
    /// Cumulative busy time over all workers.
    pub busy_ns: u64,
    pub uptime_ns: u64,
    /// Busy fraction of the last completed monitor period.
    pub utilization: f64,
    pub scale_out: bool,
    pub scale_out_signals: u64,
    pub store_users: usize,
    pub store_digest: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WireMessage {
    Recommend {
        req_id: u64,
        user_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        event: Option<WireEvent>,
    },
    FeatureUpdate {
        req_id: u64,
        user_id: String,
        event: WireEvent,
    },
    RecommendResponse {
        req_id: u64,
        score: f64,
        p_gbdt: f64,
        p_lstm: f64,
        decision: bool,
        cold_start: bool,
        timing: RecommendTiming,
    },
    Ack {
        req_id: u64,
        ok: bool,
        process_time: f64,
        timing: UpdateTiming,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
    Error {
        req_id: Option<u64>,
        message: String,
    },
    Stats {
        req_id: u64,
    },
    StatsResponse {
        req_id: u64,
        stats: ServerStats,
    },
}

impl WireMessage {
    pub fn req_id(&self) -> Option<u64> {
        match self {
            WireMessage::Recommend { req_id, .. }
            | WireMessage::FeatureUpdate { req_id, .. }
            | WireMessage::RecommendResponse { req_id, .. }
            | WireMessage::Ack { req_id, .. }
            | WireMessage::Stats { req_id }
            | WireMessage::StatsResponse { req_id, .. } => Some(*req_id),
            WireMessage::Error { req_id, .. } => *req_id,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            WireMessage::Recommend { .. } => "recommend",
            WireMessage::FeatureUpdate { .. } => "feature_update",
            WireMessage::RecommendResponse { .. } => "recommend_response",
            WireMessage::Ack { .. } => "ack",
            WireMessage::Error { .. } => "error",
            WireMessage::Stats { .. } => "stats",
            WireMessage::StatsResponse { .. } => "stats_response",
        }
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("wire messages serialize")
    }

    /// Parse a frame body. On failure the request id is recovered when the
    /// body is at least a JSON object carrying a numeric `req_id`.
    pub fn from_json(body: &[u8]) -> Result<Self, MessageError> {
        let value: Value = serde_json::from_slice(body).map_err(|e| MessageError::Json(e.to_string()))?;
        let req_id = value.get("req_id").and_then(Value::as_u64);
        serde_json::from_value(value).map_err(|e| MessageError::Invalid {
            req_id,
            message: e.to_string(),
        })
    }

    /// Length-prefixed frame bytes.
    pub fn to_frame(&self) -> Vec<u8> {
        frame(&self.to_json())
    }
}

pub fn frame(body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
    out
}

pub fn write_frame<W: Write>(w: &mut W, body: &[u8]) -> io::Result<()> {
    w.write_all(&frame(body))?;
    w.flush()
}

/// Read the 4-byte length prefix. `Ok(None)` on a clean end of stream.
pub fn read_frame_len<R: Read>(r: &mut R, max: usize) -> Result<Option<usize>, FrameError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(FrameError::Truncated),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > max {
        return Err(FrameError::Oversize { len, max });
    }
    Ok(Some(len))
}

pub fn read_frame_body<R: Read>(r: &mut R, len: usize) -> Result<Vec<u8>, FrameError> {
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => FrameError::Truncated,
        _ => FrameError::Io(e),
    })?;
    Ok(body)
}

pub fn read_frame<R: Read>(r: &mut R, max: usize) -> Result<Option<Vec<u8>>, FrameError> {
    match read_frame_len(r, max)? {
        None => Ok(None),
        Some(len) => read_frame_body(r, len).map(Some),
    }
}
