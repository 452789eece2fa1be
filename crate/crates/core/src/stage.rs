//! Stage vocabulary and the timing-trace event stream shared by the
//! pipeline (producer) and the metrics suite (consumer).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The three processing stages a frame moves through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Detect,
    Attributes,
    Similarity,
}

impl StageKind {
    pub const ALL: [StageKind; 3] = [
        StageKind::Detect,
        StageKind::Attributes,
        StageKind::Similarity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::Detect => "detect",
            StageKind::Attributes => "attributes",
            StageKind::Similarity => "similarity",
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "detect" => Ok(StageKind::Detect),
            "attributes" => Ok(StageKind::Attributes),
            "similarity" => Ok(StageKind::Similarity),
            other => Err(format!("unknown stage `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceEventKind {
    Grab,
    StageStart,
    StageDone,
    Skip,
    Drop,
    Evict,
}

/// One line of the newline-delimited timing trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub event: TraceEventKind,
    pub frame_id: u64,
    pub stage: Option<StageKind>,
    pub t_ns: u64,
}

impl TraceEvent {
    pub fn new(event: TraceEventKind, frame_id: u64, stage: Option<StageKind>, t_ns: u64) -> Self {
        Self {
            event,
            frame_id,
            stage,
            t_ns,
        }
    }
}
