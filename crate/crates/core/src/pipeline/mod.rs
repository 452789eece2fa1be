//! The asynchronous frame store, controller loop and stage-worker
//! machinery: frames flow from a grabber into a bounded buffer, stage
//! workers poll for the newest eligible frame, and the controller merges
//! results and emits the output stream.

mod controller;
mod engine;
mod exec;
mod sim;
mod source;
mod store;

pub use controller::{Controller, OutputSinks, RunReport, StageReport};
pub use engine::{run, EngineConfig, EngineError, Pacing, StageSetup};
pub use exec::StageExecutor;
pub use sim::run_deterministic;
pub use source::{FrameSource, SyntheticSource};
pub use store::{
    CompleteOutcome, FrameLease, FrameStore, NextFrameOutcome, StageCounters, StoreCounters,
    StoreError, SubmitOutcome,
};

use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::bbox::BoundingBox;
use crate::frame::FramePayload;
use crate::geometry::{KeypointSet, SimilarityTransform};
use crate::inference::Embedding;
use crate::stage::StageKind;
use crate::tracking::AttributeEstimate;

/// Per-stage status of a frame. Transitions are monotone:
/// pending -> in_progress -> done, or pending -> skipped; never backwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageState {
    Pending,
    InProgress,
    Done,
    Skipped,
}

/// A grabbed frame: id, grab timestamp and the image payload.
#[derive(Debug, Clone)]
pub struct Frame {
    pub id: u64,
    pub timestamp_ns: u64,
    pub payload: Arc<FramePayload>,
}

/// One detected face in one frame, progressively enriched by the stages.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceObservation {
    pub frame_id: u64,
    pub bbox: BoundingBox,
    pub detection_score: f64,
    pub keypoints: Option<KeypointSet>,
    pub transform: Option<SimilarityTransform>,
    pub attributes: Option<AttributeEstimate>,
    pub embedding: Option<Embedding>,
    pub gallery_match: Option<GalleryMatch>,
}

impl FaceObservation {
    pub fn detected(frame_id: u64, bbox: BoundingBox, detection_score: f64) -> Self {
        Self {
            frame_id,
            bbox,
            detection_score,
            keypoints: None,
            transform: None,
            attributes: None,
            embedding: None,
            gallery_match: None,
        }
    }
}

/// Nearest-gallery hit attached to an observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GalleryMatch {
    pub identity_id: u64,
    pub distance: f64,
}

/// Static description of one pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDescriptor {
    pub kind: StageKind,
    /// Higher priority stages are dispatched first when several stages
    /// have eligible work at the same instant.
    pub priority: i32,
    pub prerequisites: Vec<StageKind>,
    pub worker_count: usize,
}

impl StageDescriptor {
    /// The conventional stage table: detection first, then attributes and
    /// similarity, both gated on detection. Expression (attributes) is
    /// prioritized over similarity.
    pub fn standard(kind: StageKind, worker_count: usize) -> Self {
        match kind {
            StageKind::Detect => Self {
                kind,
                priority: 100,
                prerequisites: vec![],
                worker_count,
            },
            StageKind::Attributes => Self {
                kind,
                priority: 50,
                prerequisites: vec![StageKind::Detect],
                worker_count,
            },
            StageKind::Similarity => Self {
                kind,
                priority: 10,
                prerequisites: vec![StageKind::Detect],
                worker_count,
            },
        }
    }
}
