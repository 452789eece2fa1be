//! Engine for a real-time, multi-stage facial analysis pipeline.
//!
//! The crate is organized around the flow of a frame through the system:
//! a grabber submits frames into a bounded [`pipeline::FrameStore`], stage
//! workers poll it newest-first, detections are associated into persistent
//! [`tracking::Track`]s, faces are aligned against a five-point
//! [`geometry::KeypointTemplate`], embeddings are matched against an
//! [`simindex::EmbeddingGallery`], and everything is measured by the
//! [`metrics`] suite.
//!
//! All neural inference sits behind the backend traits in [`inference`];
//! the deterministic mock backends make the scheduling, geometry, tracking
//! and retrieval logic fully testable without trained models.

pub mod bbox;
pub mod frame;
pub mod geometry;
pub mod inference;
pub mod metrics;
pub mod pipeline;
pub mod scene;
pub mod simindex;
pub mod stage;
pub mod tracking;

pub use bbox::BoundingBox;
pub use frame::{FramePayload, PixelFormat};
pub use geometry::{KeypointSet, KeypointTemplate, Point2, SimilarityTransform};
pub use inference::{AgeDistribution, DetectorOutput, Embedding, MultitaskOutput};
pub use pipeline::{FaceObservation, Frame, FrameStore, StageDescriptor};
pub use scene::Scene;
pub use simindex::{EmbeddingGallery, SearchHit};
pub use stage::{StageKind, TraceEvent, TraceEventKind};
pub use tracking::{AttributeEstimate, Track, Tracker};
