//! Stage processing shared by the threaded workers and the deterministic
//! scheduler: detection over the whole frame, and per-face alignment,
//! attribute estimation and embedding/search.

use std::sync::Arc;

use crate::geometry::{solve_similarity, KeypointTemplate};
use crate::inference::{DetectorBackend, FaceBackend, FaceContext};
use crate::simindex::EmbeddingGallery;
use crate::stage::StageKind;

use super::{FaceObservation, FrameLease, GalleryMatch};

/// Result of running one stage on one frame.
pub struct StageOutput {
    pub observations: Vec<FaceObservation>,
    /// Synthetic cost in virtual nanoseconds (mock backends only).
    pub cost_ns: u64,
    /// Contained backend/geometry failures; processing continued.
    pub failures: u64,
}

/// Immutable per-run context for stage processing.
pub struct StageExecutor {
    pub template: Arc<KeypointTemplate>,
    pub gallery: Option<Arc<EmbeddingGallery>>,
}

impl StageExecutor {
    pub fn run_detect(&self, backend: &dyn DetectorBackend, lease: &FrameLease) -> StageOutput {
        let cost_ns = backend.synthetic_cost_ns();
        match backend.detect(lease.frame.id, &lease.frame.payload) {
            Ok(output) => {
                let (w, h) = (
                    lease.frame.payload.width as f64,
                    lease.frame.payload.height as f64,
                );
                let observations = output
                    .boxes()
                    .iter()
                    .filter_map(|&(bbox, score)| {
                        let clamped = bbox.clamp_to(w, h);
                        clamped
                            .is_valid()
                            .then(|| FaceObservation::detected(lease.frame.id, clamped, score))
                    })
                    .collect();
                StageOutput {
                    observations,
                    cost_ns,
                    failures: 0,
                }
            }
            Err(_) => StageOutput {
                observations: Vec::new(),
                cost_ns,
                failures: 1,
            },
        }
    }

    /// Runs keypoint location + alignment, then the stage-specific tail:
    /// multitask attributes or embedding + gallery search.
    pub fn run_face_stage(
        &self,
        stage: StageKind,
        backend: &dyn FaceBackend,
        lease: &FrameLease,
    ) -> StageOutput {
        let mut observations = lease.observations.clone();
        let mut cost_ns = 0u64;
        let mut failures = 0u64;

        for (face_index, obs) in observations.iter_mut().enumerate() {
            let ctx = FaceContext {
                frame_id: lease.frame.id,
                face_index,
                payload: &lease.frame.payload,
                bbox: obs.bbox,
                transform: None,
            };
            cost_ns += backend.op_cost_ns(crate::inference::FaceOp::Keypoints);
            let keypoints = match backend.keypoints(&ctx) {
                Ok(kp) => kp,
                Err(_) => {
                    failures += 1;
                    continue;
                }
            };
            let transform = match solve_similarity(&keypoints, &self.template.points) {
                Ok(t) => t,
                Err(_) => {
                    failures += 1;
                    obs.keypoints = Some(keypoints);
                    continue;
                }
            };
            obs.keypoints = Some(keypoints);
            obs.transform = Some(transform);

            let ctx = FaceContext {
                transform: Some(&transform),
                ..ctx
            };
            match stage {
                StageKind::Attributes => {
                    cost_ns += backend.op_cost_ns(crate::inference::FaceOp::Multitask);
                    match backend.multitask(&ctx) {
                        Ok(out) => obs.attributes = Some(out.to_estimate()),
                        Err(_) => failures += 1,
                    }
                }
                StageKind::Similarity => {
                    cost_ns += backend.op_cost_ns(crate::inference::FaceOp::Embed);
                    match backend.embed(&ctx) {
                        Ok(embedding) => {
                            if let Some(gallery) = &self.gallery {
                                match gallery.search(&embedding, 1) {
                                    Ok(hits) if !hits.is_empty() => {
                                        obs.gallery_match = Some(GalleryMatch {
                                            identity_id: hits[0].identity_id,
                                            distance: hits[0].distance,
                                        });
                                    }
                                    Ok(_) => {}
                                    Err(_) => failures += 1,
                                }
                            }
                            obs.embedding = Some(embedding);
                        }
                        Err(_) => failures += 1,
                    }
                }
                StageKind::Detect => unreachable!("detect is not a face stage"),
            }
        }

        StageOutput {
            observations,
            cost_ns,
            failures,
        }
    }
}
