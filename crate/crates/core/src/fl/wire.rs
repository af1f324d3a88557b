use serde::Serialize;

use crate::model::serialize::Manifest;
use crate::model::ParamGroup;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Server to client.
    Down,
    /// Client to server.
    Up,
}

/// One transmission: everything that crossed the wire, byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WireRecord {
    pub round: usize,
    pub direction: Direction,
    pub client_id: usize,
    pub tensor_names: Vec<String>,
    pub byte_count: usize,
    #[serde(skip)]
    pub manifest: Manifest,
    #[serde(skip)]
    pub payload: Vec<u8>,
}

impl WireRecord {
    pub fn new(round: usize, direction: Direction, client_id: usize, manifest: Manifest, payload: Vec<u8>) -> Self {
        Self {
            round,
            direction,
            client_id,
            tensor_names: manifest.names().map(str::to_string).collect(),
            byte_count: payload.len(),
            manifest,
            payload,
        }
    }

    /// Whether every transmitted tensor belongs to the global adapter.
    pub fn only_global(&self) -> bool {
        let prefix = format!("{}.", ParamGroup::ThetaG.prefix());
        self.tensor_names.iter().all(|n| n.starts_with(&prefix))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct WireTrace {
    pub records: Vec<WireRecord>,
}

impl WireTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, record: WireRecord) {
        self.records.push(record);
    }

    /// Bytes moved for `client_id` in `round` and `direction`.
    pub fn bytes(&self, round: usize, client_id: usize, direction: Direction) -> usize {
        self.records
            .iter()
            .filter(|r| r.round == round && r.client_id == client_id && r.direction == direction)
            .map(|r| r.byte_count)
            .sum()
    }

    /// Whether `needle` occurs anywhere in a transmitted payload.
    pub fn contains_bytes(&self, needle: &[u8]) -> bool {
        !needle.is_empty()
            && self
                .records
                .iter()
                .any(|r| r.payload.windows(needle.len()).any(|w| w == needle))
    }
}
