use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use super::Value;
use crate::trace_io::FrameId;

#[derive(Debug, Error, PartialEq)]
#[error("property `{property}` is not recorded for track {track_id}")]
pub struct SchemaError {
    pub track_id: u64,
    pub property: String,
}

/// Persistent identity of one object across frames, with bounded
/// per-property history.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub track_id: u64,
    pub class_name: String,
    pub last_seen: FrameId,
    history: BTreeMap<String, VecDeque<Value>>,
    capacity: BTreeMap<String, usize>,
}

impl Track {
    /// `capacity` maps each recorded property to its maximum declared window.
    pub fn new(track_id: u64, class_name: &str, capacity: BTreeMap<String, usize>) -> Self {
        Track {
            track_id,
            class_name: class_name.to_string(),
            last_seen: 0,
            history: capacity.keys().map(|k| (k.clone(), VecDeque::new())).collect(),
            capacity,
        }
    }

    pub fn push(&mut self, property: &str, value: Value, frame: FrameId) -> Result<(), SchemaError> {
        let cap = *self.capacity.get(property).ok_or_else(|| self.schema_error(property))?;
        let buf = self.history.get_mut(property).expect("history has capacity keys");
        buf.push_back(value);
        while buf.len() > cap {
            buf.pop_front();
        }
        self.last_seen = frame;
        Ok(())
    }

    /// The `k` most recent values oldest-first, or `None` if fewer than `k`
    /// have been recorded.
    pub fn window(&self, property: &str, k: usize) -> Result<Option<Vec<Value>>, SchemaError> {
        let buf = self.history.get(property).ok_or_else(|| self.schema_error(property))?;
        if k == 0 || buf.len() < k {
            return Ok(None);
        }
        Ok(Some(buf.iter().skip(buf.len() - k).cloned().collect()))
    }

    pub fn history_len(&self, property: &str) -> usize {
        self.history.get(property).map_or(0, VecDeque::len)
    }

    pub fn capacity(&self, property: &str) -> Option<usize> {
        self.capacity.get(property).copied()
    }

    fn schema_error(&self, property: &str) -> SchemaError {
        SchemaError { track_id: self.track_id, property: property.to_string() }
    }
}
