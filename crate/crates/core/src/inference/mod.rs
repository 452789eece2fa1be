//! Backend contracts for detection, keypoint location, attribute
//! estimation and embedding, plus the deterministic mock backends and the
//! subprocess protocol for attaching real models.
//!
//! Every backend response is validated against its output type's
//! invariants before it enters the pipeline; invalid responses never reach
//! the tracker or the output stream.

mod external;
mod mock;
pub mod protocol;

pub use external::{ExternalBackend, ProcessBackendSpec};
pub use mock::{MockBackend, MockBackendConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BoundingBox;
use crate::frame::FramePayload;
use crate::geometry::{KeypointSet, SimilarityTransform};
use crate::tracking::AttributeEstimate;

/// Number of age classes (years 0 through 100 inclusive).
pub const AGE_CLASSES: usize = 101;

/// Default embedding dimensionality for the mock backends. Real backends
/// declare theirs in the protocol handshake.
pub const DEFAULT_EMBEDDING_DIM: usize = 128;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("failed to spawn backend process: {0}")]
    SpawnFailure(String),
    #[error("backend protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("backend timed out after {0:?}")]
    Timeout(std::time::Duration),
    #[error("invalid age distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid backend output: {0}")]
    InvalidOutput(String),
}

/// Scored face boxes, sorted by descending score by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutput {
    boxes: Vec<(BoundingBox, f64)>,
}

impl DetectorOutput {
    pub fn new(mut boxes: Vec<(BoundingBox, f64)>) -> Result<Self, BackendError> {
        for (b, score) in &boxes {
            if !b.is_valid() {
                return Err(BackendError::InvalidOutput(
                    "detection box must be finite with positive area".into(),
                ));
            }
            if !score.is_finite() || !(0.0..=1.0).contains(score) {
                return Err(BackendError::InvalidOutput(format!(
                    "detection score {score} outside [0, 1]"
                )));
            }
        }
        boxes.sort_by(|a, b| b.1.total_cmp(&a.1));
        Ok(Self { boxes })
    }

    pub fn empty() -> Self {
        Self { boxes: Vec::new() }
    }

    pub fn boxes(&self) -> &[(BoundingBox, f64)] {
        &self.boxes
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// A 101-class age distribution over years 0..=100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct AgeDistribution {
    probs: Vec<f64>,
}

impl AgeDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, BackendError> {
        if probs.len() != AGE_CLASSES {
            return Err(BackendError::InvalidDistribution(format!(
                "expected {AGE_CLASSES} classes, got {}",
                probs.len()
            )));
        }
        let mut sum = 0.0;
        for &p in &probs {
            if !p.is_finite() || p < 0.0 {
                return Err(BackendError::InvalidDistribution(
                    "probabilities must be finite and non-negative".into(),
                ));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(BackendError::InvalidDistribution(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    /// All mass on a single age class.
    pub fn delta(age_class: usize) -> Self {
        let mut probs = vec![0.0; AGE_CLASSES];
        probs[age_class.min(AGE_CLASSES - 1)] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

impl TryFrom<Vec<f64>> for AgeDistribution {
    type Error = String;

    fn try_from(probs: Vec<f64>) -> Result<Self, Self::Error> {
        AgeDistribution::new(probs).map_err(|e| e.to_string())
    }
}

impl From<AgeDistribution> for Vec<f64> {
    fn from(d: AgeDistribution) -> Self {
        d.probs
    }
}

/// Decodes an age distribution to years as its expectation.
pub fn decode_age(d: &AgeDistribution) -> f64 {
    d.probs
        .iter()
        .enumerate()
        .map(|(k, &p)| k as f64 * p)
        .sum()
}

/// The three branches of the multitask head.
#[derive(Debug, Clone, PartialEq)]
pub struct MultitaskOutput {
    pub age: AgeDistribution,
    pub gender_p_female: f64,
    pub smile_p: f64,
}

impl MultitaskOutput {
    pub fn new(
        age: AgeDistribution,
        gender_p_female: f64,
        smile_p: f64,
    ) -> Result<Self, BackendError> {
        for (name, p) in [("gender", gender_p_female), ("smile", smile_p)] {
            if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                return Err(BackendError::InvalidOutput(format!(
                    "{name} probability {p} outside [0, 1]"
                )));
            }
        }
        Ok(Self {
            age,
            gender_p_female,
            smile_p,
        })
    }

    pub fn to_estimate(&self) -> AttributeEstimate {
        AttributeEstimate::new(decode_age(&self.age), self.gender_p_female, self.smile_p)
    }
}

/// A feature vector, optionally unit-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f32>,
    unit_normalized: bool,
}

impl Embedding {
    pub fn raw(values: Vec<f32>) -> Result<Self, BackendError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::InvalidOutput(
                "embedding contains non-finite values".into(),
            ));
        }
        Ok(Self {
            values,
            unit_normalized: false,
        })
    }

    /// Normalizes to unit L2 norm.
    pub fn unit_normalized(values: Vec<f32>) -> Result<Self, BackendError> {
        let e = Self::raw(values)?;
        let norm = e
            .values
            .iter()
            .map(|&x| x as f64 * x as f64)
            .sum::<f64>()
            .sqrt();
        if norm <= 0.0 {
            return Err(BackendError::InvalidOutput(
                "cannot normalize a zero embedding".into(),
            ));
        }
        let values = e.values.iter().map(|&x| (x as f64 / norm) as f32).collect();
        Ok(Self {
            values,
            unit_normalized: true,
        })
    }

    /// Wraps values claimed to be unit-normalized, verifying the claim.
    pub fn claimed_unit(values: Vec<f32>) -> Result<Self, BackendError> {
        let e = Self::raw(values)?;
        let norm = e
            .values
            .iter()
            .map(|&x| x as f64 * x as f64)
            .sum::<f64>()
            .sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(BackendError::InvalidOutput(format!(
                "embedding norm {norm} is not within 1e-6 of 1"
            )));
        }
        Ok(Self {
            values,
            unit_normalized: true,
        })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_unit_normalized(&self) -> bool {
        self.unit_normalized
    }
}

/// Per-face context handed to keypoint/attribute/embedding backends. The
/// backend performs its own cropping and resampling from the full frame.
#[derive(Debug, Clone, Copy)]
pub struct FaceContext<'a> {
    pub frame_id: u64,
    pub face_index: usize,
    pub payload: &'a FramePayload,
    pub bbox: BoundingBox,
    pub transform: Option<&'a SimilarityTransform>,
}

/// Which per-face operation a synthetic cost is being asked for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaceOp {
    Keypoints,
    Multitask,
    Embed,
}

/// Whole-frame face detection.
pub trait DetectorBackend: Send + Sync {
    fn detect(&self, frame_id: u64, payload: &FramePayload) -> Result<DetectorOutput, BackendError>;

    /// Virtual call cost for the deterministic scheduler. Real backends
    /// have real latency and report zero.
    fn synthetic_cost_ns(&self) -> u64 {
        0
    }
}

/// Per-face keypoints, attributes and embeddings.
pub trait FaceBackend: Send + Sync {
    fn keypoints(&self, ctx: &FaceContext<'_>) -> Result<KeypointSet, BackendError>;
    fn multitask(&self, ctx: &FaceContext<'_>) -> Result<MultitaskOutput, BackendError>;
    fn embed(&self, ctx: &FaceContext<'_>) -> Result<Embedding, BackendError>;

    /// Declared embedding dimensionality.
    fn embedding_dim(&self) -> usize {
        DEFAULT_EMBEDDING_DIM
    }

    /// Virtual per-operation cost for the deterministic scheduler.
    fn op_cost_ns(&self, _op: FaceOp) -> u64 {
        0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_age_examples() {
        assert_eq!(decode_age(&AgeDistribution::delta(25)), 25.0);

        let uniform = AgeDistribution::new(vec![1.0 / 101.0; 101]).unwrap();
        assert!((decode_age(&uniform) - 50.0).abs() < 1e-9);

        let mut probs = vec![0.0; 101];
        probs[24] = 0.5;
        probs[26] = 0.5;
        let d = AgeDistribution::new(probs).unwrap();
        assert_eq!(decode_age(&d), 25.0);
    }

    #[test]
    fn age_distribution_invariants() {
        assert!(matches!(
            AgeDistribution::new(vec![0.01; 100]),
            Err(BackendError::InvalidDistribution(_))
        ));
        let mut probs = vec![0.0; 101];
        probs[10] = 0.9;
        assert!(matches!(
            AgeDistribution::new(probs),
            Err(BackendError::InvalidDistribution(_))
        ));
        let mut probs = vec![0.0; 101];
        probs[10] = 1.5;
        probs[11] = -0.5;
        assert!(matches!(
            AgeDistribution::new(probs),
            Err(BackendError::InvalidDistribution(_))
        ));
    }

    #[test]
    fn detector_output_sorted_and_validated() {
        let out = DetectorOutput::new(vec![
            (BoundingBox::new(0.0, 0.0, 5.0, 5.0), 0.4),
            (BoundingBox::new(1.0, 1.0, 5.0, 5.0), 0.9),
        ])
        .unwrap();
        assert_eq!(out.boxes()[0].1, 0.9);
        assert!(DetectorOutput::new(vec![(BoundingBox::new(0.0, 0.0, 5.0, 5.0), 1.5)]).is_err());
        assert!(DetectorOutput::new(vec![(BoundingBox::new(0.0, 0.0, -1.0, 5.0), 0.5)]).is_err());
    }

    #[test]
    fn embedding_normalization() {
        let e = Embedding::unit_normalized(vec![3.0, 4.0]).unwrap();
        let norm: f64 = e.values().iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert!(e.is_unit_normalized());

        assert!(Embedding::claimed_unit(vec![3.0, 4.0]).is_err());
        assert!(Embedding::raw(vec![f32::NAN]).is_err());
        assert!(Embedding::unit_normalized(vec![0.0, 0.0]).is_err());
    }
}
