//! User action events and the transaction CSV format.
//!
//! Columns: `ts_ms,user_id,event_type,item_id,category,price`, header row
//! required, `price` empty for non-order events. Files are clock-sorted.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::FeatureError;

pub const CSV_HEADER: [&str; 6] = ["ts_ms", "user_id", "event_type", "item_id", "category", "price"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventType {
    View,
    Order,
    Impression,
}

impl EventType {
    pub const ALL: [EventType; 3] = [EventType::View, EventType::Order, EventType::Impression];

    pub fn as_str(self) -> &'static str {
        match self {
            EventType::View => "view",
            EventType::Order => "order",
            EventType::Impression => "impression",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventType {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "view" => Ok(EventType::View),
            "order" => Ok(EventType::Order),
            "impression" => Ok(EventType::Impression),
            other => Err(FeatureError::InvalidEvent(format!("unknown event type {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    /// Epoch milliseconds.
    pub ts: i64,
    pub user_id: String,
    pub event_type: EventType,
    pub item: String,
    pub category: String,
    pub price: Option<f64>,
}

impl Event {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.user_id.is_empty() {
            return Err(FeatureError::InvalidEvent("empty user_id".into()));
        }
        if let Some(p) = self.price {
            if !p.is_finite() || p < 0.0 {
                return Err(FeatureError::InvalidEvent(format!("invalid price {p}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    ts_ms: i64,
    user_id: String,
    event_type: String,
    item_id: String,
    category: String,
    price: Option<f64>,
}

/// Read a transaction CSV, checking that timestamps never decrease.
pub fn read_events<R: Read>(reader: R) -> Result<Vec<Event>, FeatureError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| FeatureError::Csv(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(FeatureError::Csv(format!(
            "unexpected header {:?}, expected {:?}",
            headers.iter().collect::<Vec<_>>(),
            CSV_HEADER
        )));
    }
    let mut events = Vec::new();
    let mut prev_ts = i64::MIN;
    for (i, row) in rdr.deserialize::<CsvRow>().enumerate() {
        // 1-based, counting the header
        let line = i + 2;
        let row = row.map_err(|e| FeatureError::Csv(format!("line {line}: {e}")))?;
        let event = Event {
            ts: row.ts_ms,
            user_id: row.user_id,
            event_type: row
                .event_type
                .parse()
                .map_err(|e| FeatureError::Csv(format!("line {line}: {e}")))?,
            item: row.item_id,
            category: row.category,
            price: row.price,
        };
        event
            .validate()
            .map_err(|e| FeatureError::Csv(format!("line {line}: {e}")))?;
        if event.ts < prev_ts {
            return Err(FeatureError::OutOfOrder {
                position: format!("line {line}"),
                ts: event.ts,
                prev_ts,
            });
        }
        prev_ts = event.ts;
        events.push(event);
    }
    Ok(events)
}

pub fn read_events_file(path: impl AsRef<Path>) -> Result<Vec<Event>, FeatureError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| FeatureError::Io(format!("{}: {e}", path.display())))?;
    read_events(std::io::BufReader::new(file))
}

pub fn write_events<W: Write>(writer: W, events: &[Event]) -> Result<(), FeatureError> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    let csv_err = |e: csv::Error| FeatureError::Csv(e.to_string());
    wtr.write_record(CSV_HEADER).map_err(csv_err)?;
    for e in events {
        let price = e.price.map(|p| format!("{p:.2}")).unwrap_or_default();
        wtr.write_record([
            e.ts.to_string().as_str(),
            &e.user_id,
            e.event_type.as_str(),
            &e.item,
            &e.category,
            &price,
        ])
        .map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| FeatureError::Io(e.to_string()))
}
