//! Deterministic mock backends scripted by a synthetic scene.
//!
//! Every output is a pure function of (frame id, scripted scene, seed), so
//! runs with the same seed are bit-identical. Synthetic latency is slept
//! in real-time mode and reported as a virtual cost in deterministic mode.

use std::sync::Arc;
use std::time::Duration;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::frame::FramePayload;
use crate::geometry::{KeypointSet, Point2};
use crate::scene::{Scene, SceneFace};

use super::{
    AgeDistribution, BackendError, DetectorBackend, DetectorOutput, Embedding, FaceBackend,
    FaceContext, FaceOp, MultitaskOutput, AGE_CLASSES, DEFAULT_EMBEDDING_DIM,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockBackendConfig {
    pub detect_latency_ms: f64,
    pub keypoint_latency_ms: f64,
    pub multitask_latency_ms: f64,
    pub embed_latency_ms: f64,
    /// Uniform box jitter in pixels applied to scripted detections.
    pub jitter_px: f64,
    /// Uniform jitter applied to mock keypoints.
    pub keypoint_jitter_px: f64,
    /// Uniform age noise in years.
    pub noise_age: f64,
    /// Uniform probability noise for gender/smile.
    pub noise_prob: f64,
    /// Intra-class embedding noise (epsilon).
    pub embed_noise: f64,
    pub embedding_dim: usize,
}

impl Default for MockBackendConfig {
    fn default() -> Self {
        Self {
            detect_latency_ms: 0.0,
            keypoint_latency_ms: 0.0,
            multitask_latency_ms: 0.0,
            embed_latency_ms: 0.0,
            jitter_px: 0.0,
            keypoint_jitter_px: 0.0,
            noise_age: 0.0,
            noise_prob: 0.0,
            embed_noise: 0.0,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
        }
    }
}

/// Stateless, shareable mock implementing both backend traits.
#[derive(Debug, Clone)]
pub struct MockBackend {
    scene: Arc<Scene>,
    seed: u64,
    config: MockBackendConfig,
    sleep_enabled: bool,
}

// Domain tags keep the per-purpose random streams independent.
const TAG_DETECT: u64 = 0x01;
const TAG_KEYPOINTS: u64 = 0x02;
const TAG_AGE: u64 = 0x03;
const TAG_GENDER: u64 = 0x04;
const TAG_SMILE: u64 = 0x05;
const TAG_EMBED_NOISE: u64 = 0x06;
const TAG_IDENTITY_BASE: u64 = 0x07;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn mix(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag ^ splitmix64(a ^ splitmix64(b))))
}

impl MockBackend {
    pub fn new(scene: Arc<Scene>, seed: u64, config: MockBackendConfig) -> Self {
        Self {
            scene,
            seed,
            config,
            sleep_enabled: true,
        }
    }

    /// Disables real sleeping; latencies are only reported as virtual
    /// costs. Used by the deterministic scheduler.
    pub fn without_sleep(mut self) -> Self {
        self.sleep_enabled = false;
        self
    }

    pub fn config(&self) -> &MockBackendConfig {
        &self.config
    }

    pub fn detect_cost_ns(&self) -> u64 {
        (self.config.detect_latency_ms * 1e6) as u64
    }

    pub fn face_op_cost_ns(&self, op: FaceOp) -> u64 {
        let ms = match op {
            FaceOp::Keypoints => self.config.keypoint_latency_ms,
            FaceOp::Multitask => self.config.multitask_latency_ms,
            FaceOp::Embed => self.config.embed_latency_ms,
        };
        (ms * 1e6) as u64
    }

    fn sleep(&self, ns: u64) {
        if self.sleep_enabled && ns > 0 {
            std::thread::sleep(Duration::from_nanos(ns));
        }
    }

    fn scripted_faces(&self, frame_id: u64) -> &[SceneFace] {
        self.scene
            .frames
            .get(frame_id as usize)
            .map(|f| f.faces.as_slice())
            .unwrap_or(&[])
    }

    /// The scripted face whose box center is nearest the given box.
    fn face_for_box(&self, frame_id: u64, bbox: &BoundingBox) -> Option<&SceneFace> {
        let faces = self.scripted_faces(frame_id);
        let center = bbox.center();
        faces.iter().min_by(|a, b| {
            let da = a.bbox().center().distance(&center);
            let db = b.bbox().center().distance(&center);
            da.total_cmp(&db)
        })
    }

    /// Deterministic base direction for an identity, unit length.
    fn identity_base(&self, identity: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, TAG_IDENTITY_BASE, identity, 0));
        let dim = self.config.embedding_dim;
        let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in v.iter_mut() {
                *x /= norm;
            }
        } else {
            v[0] = 1.0;
        }
        v
    }

    /// Age branch: a two-class mixture whose expectation equals the
    /// (noisy) scripted age exactly.
    pub fn mock_age(&self, ctx: &FaceContext<'_>) -> Result<AgeDistribution, BackendError> {
        let face = self.face_for_box(ctx.frame_id, &ctx.bbox).ok_or_else(|| {
            BackendError::InvalidOutput("no scripted face for frame".into())
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(
            self.seed,
            TAG_AGE,
            ctx.frame_id,
            ctx.face_index as u64,
        ));
        let noise = if self.config.noise_age > 0.0 {
            rng.gen_range(-self.config.noise_age..=self.config.noise_age)
        } else {
            0.0
        };
        let age = (face.age + noise).clamp(0.0, (AGE_CLASSES - 1) as f64);
        let lower = age.floor() as usize;
        let frac = age - lower as f64;
        let mut probs = vec![0.0; AGE_CLASSES];
        if lower + 1 < AGE_CLASSES {
            probs[lower] = 1.0 - frac;
            probs[lower + 1] = frac;
        } else {
            probs[lower] = 1.0;
        }
        AgeDistribution::new(probs)
    }

    pub fn mock_gender(&self, ctx: &FaceContext<'_>) -> Result<f64, BackendError> {
        let face = self.face_for_box(ctx.frame_id, &ctx.bbox).ok_or_else(|| {
            BackendError::InvalidOutput("no scripted face for frame".into())
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(
            self.seed,
            TAG_GENDER,
            ctx.frame_id,
            ctx.face_index as u64,
        ));
        let noise = if self.config.noise_prob > 0.0 {
            rng.gen_range(-self.config.noise_prob..=self.config.noise_prob)
        } else {
            0.0
        };
        Ok((face.gender + noise).clamp(0.0, 1.0))
    }

    pub fn mock_smile(&self, ctx: &FaceContext<'_>) -> Result<f64, BackendError> {
        let face = self.face_for_box(ctx.frame_id, &ctx.bbox).ok_or_else(|| {
            BackendError::InvalidOutput("no scripted face for frame".into())
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(
            self.seed,
            TAG_SMILE,
            ctx.frame_id,
            ctx.face_index as u64,
        ));
        let noise = if self.config.noise_prob > 0.0 {
            rng.gen_range(-self.config.noise_prob..=self.config.noise_prob)
        } else {
            0.0
        };
        Ok((face.smile + noise).clamp(0.0, 1.0))
    }
}

impl DetectorBackend for MockBackend {
    fn detect(
        &self,
        frame_id: u64,
        payload: &FramePayload,
    ) -> Result<DetectorOutput, BackendError> {
        self.sleep(self.detect_cost_ns());
        let faces = self.scripted_faces(frame_id);
        let mut boxes = Vec::with_capacity(faces.len());
        for (i, face) in faces.iter().enumerate() {
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix(self.seed, TAG_DETECT, frame_id, i as u64));
            let j = self.config.jitter_px;
            let (dx, dy) = if j > 0.0 {
                (rng.gen_range(-j..=j), rng.gen_range(-j..=j))
            } else {
                (0.0, 0.0)
            };
            let b = BoundingBox::new(face.bbox().x + dx, face.bbox().y + dy, face.bbox().w, face.bbox().h)
                .clamp_to(payload.width as f64, payload.height as f64);
            if b.is_valid() {
                boxes.push((b, 1.0));
            }
        }
        DetectorOutput::new(boxes)
    }
}

// Canonical fractional keypoint positions inside a detection box.
const KEYPOINT_ANCHORS: [(f64, f64); 5] = [
    (0.30, 0.38),
    (0.70, 0.38),
    (0.50, 0.58),
    (0.35, 0.78),
    (0.65, 0.78),
];

impl FaceBackend for MockBackend {
    fn keypoints(&self, ctx: &FaceContext<'_>) -> Result<KeypointSet, BackendError> {
        self.sleep(self.face_op_cost_ns(FaceOp::Keypoints));
        let mut rng = ChaCha8Rng::seed_from_u64(mix(
            self.seed,
            TAG_KEYPOINTS,
            ctx.frame_id,
            ctx.face_index as u64,
        ));
        let j = self.config.keypoint_jitter_px;
        let points: Vec<Point2> = KEYPOINT_ANCHORS
            .iter()
            .map(|&(fx, fy)| {
                let (dx, dy) = if j > 0.0 {
                    (rng.gen_range(-j..=j), rng.gen_range(-j..=j))
                } else {
                    (0.0, 0.0)
                };
                Point2::new(
                    ctx.bbox.x + fx * ctx.bbox.w + dx,
                    ctx.bbox.y + fy * ctx.bbox.h + dy,
                )
            })
            .collect();
        KeypointSet::new(points)
            .map_err(|e| BackendError::InvalidOutput(format!("mock keypoints: {e}")))
    }

    fn multitask(&self, ctx: &FaceContext<'_>) -> Result<MultitaskOutput, BackendError> {
        self.sleep(self.face_op_cost_ns(FaceOp::Multitask));
        MultitaskOutput::new(
            self.mock_age(ctx)?,
            self.mock_gender(ctx)?,
            self.mock_smile(ctx)?,
        )
    }

    fn embed(&self, ctx: &FaceContext<'_>) -> Result<Embedding, BackendError> {
        self.sleep(self.face_op_cost_ns(FaceOp::Embed));
        let face = self.face_for_box(ctx.frame_id, &ctx.bbox).ok_or_else(|| {
            BackendError::InvalidOutput("no scripted face for frame".into())
        })?;
        let base = self.identity_base(face.identity);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(
            self.seed,
            TAG_EMBED_NOISE,
            ctx.frame_id,
            ctx.face_index as u64,
        ));
        let eps = self.config.embed_noise;
        let noisy: Vec<f32> = base
            .iter()
            .map(|&b| {
                let n = if eps > 0.0 {
                    rng.gen_range(-eps..=eps)
                } else {
                    0.0
                };
                (b + n) as f32
            })
            .collect();
        Embedding::unit_normalized(noisy)
    }

    fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::PixelFormat;
    use crate::scene::SceneFrame;
    use std::time::Instant;

    fn payload() -> FramePayload {
        FramePayload::new(640, 480, PixelFormat::Gray8, vec![0; 640 * 480])
    }

    fn one_face_scene() -> Arc<Scene> {
        Arc::new(Scene {
            frames: vec![SceneFrame {
                faces: vec![SceneFace {
                    identity: 1,
                    bbox: [10.0, 10.0, 50.0, 50.0],
                    age: 30.0,
                    gender: 0.2,
                    smile: 0.8,
                }],
            }],
        })
    }

    fn ctx<'a>(p: &'a FramePayload, b: BoundingBox) -> FaceContext<'a> {
        FaceContext {
            frame_id: 0,
            face_index: 0,
            payload: p,
            bbox: b,
            transform: None,
        }
    }

    #[test]
    fn detect_exact_without_jitter() {
        let mock = MockBackend::new(one_face_scene(), 7, MockBackendConfig::default());
        let out = mock.detect(0, &payload()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out.boxes()[0].0, BoundingBox::new(10.0, 10.0, 50.0, 50.0));
        assert_eq!(out.boxes()[0].1, 1.0);
    }

    #[test]
    fn detect_deterministic_across_runs() {
        let cfg = MockBackendConfig {
            jitter_px: 2.0,
            ..Default::default()
        };
        let a = MockBackend::new(one_face_scene(), 7, cfg.clone());
        let b = MockBackend::new(one_face_scene(), 7, cfg);
        assert_eq!(
            a.detect(0, &payload()).unwrap(),
            b.detect(0, &payload()).unwrap()
        );
    }

    #[test]
    fn detect_latency_contract() {
        let cfg = MockBackendConfig {
            detect_latency_ms: 20.0,
            ..Default::default()
        };
        let mock = MockBackend::new(one_face_scene(), 7, cfg);
        let start = Instant::now();
        mock.detect(0, &payload()).unwrap();
        assert!(start.elapsed() >= Duration::from_millis(20));
    }

    #[test]
    fn no_sleep_mode_reports_cost_only() {
        let cfg = MockBackendConfig {
            detect_latency_ms: 50.0,
            ..Default::default()
        };
        let mock = MockBackend::new(one_face_scene(), 7, cfg).without_sleep();
        let start = Instant::now();
        mock.detect(0, &payload()).unwrap();
        assert!(start.elapsed() < Duration::from_millis(40));
        assert_eq!(mock.detect_cost_ns(), 50_000_000);
    }

    #[test]
    fn multitask_equals_three_single_tasks() {
        let cfg = MockBackendConfig {
            noise_age: 2.0,
            noise_prob: 0.1,
            ..Default::default()
        };
        let mock = MockBackend::new(one_face_scene(), 9, cfg);
        let p = payload();
        let c = ctx(&p, BoundingBox::new(10.0, 10.0, 50.0, 50.0));
        let joint = mock.multitask(&c).unwrap();
        assert_eq!(joint.age, mock.mock_age(&c).unwrap());
        assert_eq!(joint.gender_p_female, mock.mock_gender(&c).unwrap());
        assert_eq!(joint.smile_p, mock.mock_smile(&c).unwrap());
    }

    #[test]
    fn decoded_age_tracks_scripted_value() {
        let cfg = MockBackendConfig {
            noise_age: 1.5,
            ..Default::default()
        };
        let mock = MockBackend::new(one_face_scene(), 5, cfg);
        let p = payload();
        let c = ctx(&p, BoundingBox::new(10.0, 10.0, 50.0, 50.0));
        let age = super::super::decode_age(&mock.mock_age(&c).unwrap());
        assert!((age - 30.0).abs() <= 1.5 + 1e-9, "age = {age}");
    }

    #[test]
    fn same_identity_embeddings_are_identical_without_noise() {
        let mock = MockBackend::new(one_face_scene(), 3, MockBackendConfig::default());
        let p = payload();
        let c = ctx(&p, BoundingBox::new(10.0, 10.0, 50.0, 50.0));
        let a = mock.embed(&c).unwrap();
        let b = mock.embed(&c).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn intra_class_closer_than_inter_class() {
        // Identities A (frames 0, 1) and B (frame 2), small noise.
        let scene = Arc::new(Scene {
            frames: (0..3)
                .map(|i| SceneFrame {
                    faces: vec![SceneFace {
                        identity: if i < 2 { 1 } else { 2 },
                        bbox: [10.0, 10.0, 50.0, 50.0],
                        age: 30.0,
                        gender: 0.5,
                        smile: 0.5,
                    }],
                })
                .collect(),
        });
        let cfg = MockBackendConfig {
            embed_noise: 0.01,
            ..Default::default()
        };
        let mock = MockBackend::new(scene, 3, cfg);
        let p = payload();
        let embed_at = |frame_id: u64| {
            let c = FaceContext {
                frame_id,
                face_index: 0,
                payload: &p,
                bbox: BoundingBox::new(10.0, 10.0, 50.0, 50.0),
                transform: None,
            };
            mock.embed(&c).unwrap()
        };
        let a = embed_at(0);
        let a2 = embed_at(1);
        let b = embed_at(2);
        let cos = |x: &Embedding, y: &Embedding| -> f64 {
            x.values()
                .iter()
                .zip(y.values())
                .map(|(p, q)| *p as f64 * *q as f64)
                .sum()
        };
        assert!(cos(&a, &a2) > cos(&a, &b));
    }

    #[test]
    fn keypoints_land_inside_box_and_solve() {
        let mock = MockBackend::new(one_face_scene(), 3, MockBackendConfig::default());
        let p = payload();
        let b = BoundingBox::new(10.0, 10.0, 50.0, 50.0);
        let c = ctx(&p, b);
        let kp = mock.keypoints(&c).unwrap();
        for pt in kp.iter() {
            assert!(pt.x >= b.x && pt.x <= b.x + b.w);
            assert!(pt.y >= b.y && pt.y <= b.y + b.h);
        }
        let template = crate::geometry::canonical_template();
        let h = crate::geometry::solve_similarity(&kp, &template.points).unwrap();
        assert!(h.scale > 0.0);
    }
}
