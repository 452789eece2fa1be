//! Synthetic scene scripts: per-frame ground-truth faces that drive all
//! mock backends consistently, so tracking and search tests have known
//! answers.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BoundingBox;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("failed to read scene file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse scene: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scene: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFace {
    pub identity: u64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub age: f64,
    /// Probability the face is female.
    pub gender: f64,
    /// Probability the face is smiling.
    pub smile: f64,
}

impl SceneFace {
    pub fn bbox(&self) -> BoundingBox {
        BoundingBox::from_array(self.bbox)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneFrame {
    #[serde(default)]
    pub faces: Vec<SceneFace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub frames: Vec<SceneFrame>,
}

impl Scene {
    pub fn empty(n_frames: usize) -> Self {
        Self {
            frames: vec![SceneFrame::default(); n_frames],
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn from_json(text: &str) -> Result<Self, SceneError> {
        let scene: Scene = serde_json::from_str(text)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn load(path: &Path) -> Result<Self, SceneError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("scene serializes")
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        for (fi, frame) in self.frames.iter().enumerate() {
            for (i, face) in frame.faces.iter().enumerate() {
                if !face.bbox().is_valid() {
                    return Err(SceneError::Invalid(format!(
                        "frame {fi} face {i}: box must be finite with positive area"
                    )));
                }
                if !(0.0..=100.0).contains(&face.age) {
                    return Err(SceneError::Invalid(format!(
                        "frame {fi} face {i}: age {} outside [0, 100]",
                        face.age
                    )));
                }
                for (name, p) in [("gender", face.gender), ("smile", face.smile)] {
                    if !(0.0..=1.0).contains(&p) {
                        return Err(SceneError::Invalid(format!(
                            "frame {fi} face {i}: {name} {p} outside [0, 1]"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// A scene where each face moves along a straight line, useful for
    /// tests and benchmarks.
    pub fn linear_motion(
        n_frames: usize,
        faces: &[(u64, BoundingBox, (f64, f64))],
        attrs: &[(f64, f64, f64)],
    ) -> Self {
        let frames = (0..n_frames)
            .map(|t| SceneFrame {
                faces: faces
                    .iter()
                    .zip(attrs.iter())
                    .map(|(&(identity, start, (vx, vy)), &(age, gender, smile))| SceneFace {
                        identity,
                        bbox: [
                            start.x + vx * t as f64,
                            start.y + vy * t as f64,
                            start.w,
                            start.h,
                        ],
                        age,
                        gender,
                        smile,
                    })
                    .collect(),
            })
            .collect();
        Self { frames }
    }
}
