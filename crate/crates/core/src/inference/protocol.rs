//! The process-boundary protocol for external inference backends:
//! newline-delimited JSON over the child's standard input/output.
//!
//! Handshake: the engine sends `{"hello":{"role":"...","version":1}}`, the
//! backend replies `{"ready":{"embedding_dim":D}}` (the dimension is only
//! meaningful for the embedding role). Each request then carries an id and
//! a role-specific input; the response echoes the id with either an
//! `output` or an `error`. One request is in flight per handle.

use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::geometry::{KeypointSet, Point2, SimilarityTransform};

use super::{
    AgeDistribution, BackendError, DetectorOutput, Embedding, MultitaskOutput,
};

pub const PROTOCOL_VERSION: u32 = 1;

/// The role a backend process serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendRole {
    Detector,
    Keypoints,
    Attributes,
    Embedding,
}

impl BackendRole {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendRole::Detector => "detector",
            BackendRole::Keypoints => "keypoints",
            BackendRole::Attributes => "attributes",
            BackendRole::Embedding => "embedding",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub hello: HelloBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelloBody {
    pub role: BackendRole,
    pub version: u32,
}

impl Hello {
    pub fn new(role: BackendRole) -> Self {
        Self {
            hello: HelloBody {
                role,
                version: PROTOCOL_VERSION,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ready {
    pub ready: ReadyBody,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReadyBody {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_dim: Option<usize>,
}

/// Wire form of a similarity transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WireTransform {
    pub scale: f64,
    pub theta: f64,
    pub tx: f64,
    pub ty: f64,
}

impl From<&SimilarityTransform> for WireTransform {
    fn from(t: &SimilarityTransform) -> Self {
        Self {
            scale: t.scale,
            theta: t.theta,
            tx: t.tx,
            ty: t.ty,
        }
    }
}

/// Role-specific request input. The image travels base64-encoded; face
/// roles additionally carry the box and, when already solved, the
/// alignment transform so the backend can resample the crop itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestInput {
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub format: String,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<WireTransform>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub input: RequestInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Detector role output wire shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDetectorOutput {
    pub boxes: Vec<WireDetection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireKeypointsOutput {
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireAttributesOutput {
    pub age_probs: Vec<f64>,
    pub gender_p_female: f64,
    pub smile_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireEmbeddingOutput {
    pub vector: Vec<f32>,
    #[serde(default)]
    pub unit_normalized: bool,
}

/// Decodes and validates a detector response payload.
pub fn parse_detector_output(value: serde_json::Value) -> Result<DetectorOutput, BackendError> {
    let wire: WireDetectorOutput = serde_json::from_value(value)
        .map_err(|e| BackendError::ProtocolViolation(format!("detector output: {e}")))?;
    DetectorOutput::new(
        wire.boxes
            .into_iter()
            .map(|d| (BoundingBox::from_array(d.bbox), d.score))
            .collect(),
    )
}

pub fn parse_keypoints_output(value: serde_json::Value) -> Result<KeypointSet, BackendError> {
    let wire: WireKeypointsOutput = serde_json::from_value(value)
        .map_err(|e| BackendError::ProtocolViolation(format!("keypoints output: {e}")))?;
    if wire.points.len() != crate::geometry::CANONICAL_POINT_COUNT {
        return Err(BackendError::InvalidOutput(format!(
            "expected 5 keypoints, got {}",
            wire.points.len()
        )));
    }
    KeypointSet::new(
        wire.points
            .into_iter()
            .map(|[x, y]| Point2::new(x, y))
            .collect(),
    )
    .map_err(|e| BackendError::InvalidOutput(format!("keypoints: {e}")))
}

pub fn parse_attributes_output(value: serde_json::Value) -> Result<MultitaskOutput, BackendError> {
    let wire: WireAttributesOutput = serde_json::from_value(value)
        .map_err(|e| BackendError::ProtocolViolation(format!("attributes output: {e}")))?;
    MultitaskOutput::new(
        AgeDistribution::new(wire.age_probs)?,
        wire.gender_p_female,
        wire.smile_p,
    )
}

pub fn parse_embedding_output(value: serde_json::Value) -> Result<Embedding, BackendError> {
    let wire: WireEmbeddingOutput = serde_json::from_value(value)
        .map_err(|e| BackendError::ProtocolViolation(format!("embedding output: {e}")))?;
    if wire.unit_normalized {
        Embedding::claimed_unit(wire.vector)
    } else {
        Embedding::raw(wire.vector)
    }
}
