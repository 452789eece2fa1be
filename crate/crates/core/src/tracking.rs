//! Centroid tracking: frame-to-frame association of detections into
//! persistent tracks, plus temporal averaging of per-track attribute
//! estimates over a bounded window of recent estimates.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::geometry::Point2;

/// One age/gender/smile estimate for a face.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeEstimate {
    pub age: f64,
    pub gender_p_female: f64,
    pub smile_p: f64,
}

impl AttributeEstimate {
    pub fn new(age: f64, gender_p_female: f64, smile_p: f64) -> Self {
        Self {
            age: age.clamp(0.0, 100.0),
            gender_p_female: gender_p_female.clamp(0.0, 1.0),
            smile_p: smile_p.clamp(0.0, 1.0),
        }
    }
}

/// A persistent face identity across frames.
#[derive(Debug, Clone)]
pub struct Track {
    pub track_id: u64,
    pub last_centroid: Point2,
    pub last_seen_frame: u64,
    pub frames_missed: u32,
    history: VecDeque<AttributeEstimate>,
    window: usize,
}

impl Track {
    fn new(track_id: u64, centroid: Point2, frame_id: u64, window: usize) -> Self {
        Self {
            track_id,
            last_centroid: centroid,
            last_seen_frame: frame_id,
            frames_missed: 0,
            history: VecDeque::with_capacity(window),
            window,
        }
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    /// Appends an estimate, evicting the oldest beyond the window, and
    /// returns the arithmetic mean over the retained history.
    pub fn push_estimate(&mut self, estimate: AttributeEstimate) -> AttributeEstimate {
        if self.history.len() == self.window {
            self.history.pop_front();
        }
        self.history.push_back(estimate);
        self.smoothed().expect("history is non-empty")
    }

    /// Mean of the estimate history; `None` until the first estimate.
    pub fn smoothed(&self) -> Option<AttributeEstimate> {
        if self.history.is_empty() {
            return None;
        }
        let n = self.history.len() as f64;
        let (mut age, mut gender, mut smile) = (0.0, 0.0, 0.0);
        for e in &self.history {
            age += e.age;
            gender += e.gender_p_female;
            smile += e.smile_p;
        }
        Some(AttributeEstimate {
            age: age / n,
            gender_p_female: gender / n,
            smile_p: smile / n,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    /// Number of recent estimates averaged per track.
    pub window: usize,
    /// Gating threshold as a fraction of the detection box diagonal.
    pub gating_factor: f64,
    /// Consecutive missed frames after which a track is removed.
    pub expiry: u32,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            window: 16,
            gating_factor: 0.5,
            expiry: 10,
        }
    }
}

/// Greedy globally-nearest centroid tracker. Owned and mutated exclusively
/// by the pipeline controller; no internal locking.
#[derive(Debug)]
pub struct Tracker {
    config: TrackerConfig,
    tracks: Vec<Track>,
    next_id: u64,
}

impl Tracker {
    pub fn new(config: TrackerConfig) -> Self {
        Self {
            config,
            tracks: Vec::new(),
            next_id: 0,
        }
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn get(&self, track_id: u64) -> Option<&Track> {
        self.tracks.iter().find(|t| t.track_id == track_id)
    }

    pub fn get_mut(&mut self, track_id: u64) -> Option<&mut Track> {
        self.tracks.iter_mut().find(|t| t.track_id == track_id)
    }

    /// Associates detections with live tracks by repeatedly matching the
    /// closest (track, detection) pair within the gating distance.
    /// Unmatched detections spawn new tracks in detection order; unmatched
    /// tracks age and expire after `expiry` consecutive misses. Returns
    /// the track id assigned to each detection.
    pub fn associate(&mut self, detections: &[BoundingBox], frame_id: u64) -> Vec<u64> {
        let centroids: Vec<Point2> = detections.iter().map(|b| b.center()).collect();
        let gates: Vec<f64> = detections
            .iter()
            .map(|b| self.config.gating_factor * b.diagonal())
            .collect();

        // All admissible pairs, orderable without ambiguity: distance,
        // then lower track id, then lower detection index.
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (ti, track) in self.tracks.iter().enumerate() {
            for (di, c) in centroids.iter().enumerate() {
                let dist = track.last_centroid.distance(c);
                if dist <= gates[di] {
                    pairs.push((dist, ti, di));
                }
            }
        }
        pairs.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then_with(|| self.tracks[a.1].track_id.cmp(&self.tracks[b.1].track_id))
                .then_with(|| a.2.cmp(&b.2))
        });

        let mut track_used = vec![false; self.tracks.len()];
        let mut det_track: Vec<Option<u64>> = vec![None; detections.len()];
        for (_, ti, di) in pairs {
            if track_used[ti] || det_track[di].is_some() {
                continue;
            }
            track_used[ti] = true;
            let track = &mut self.tracks[ti];
            track.last_centroid = centroids[di];
            track.last_seen_frame = frame_id;
            track.frames_missed = 0;
            det_track[di] = Some(track.track_id);
        }

        for (ti, used) in track_used.iter().enumerate() {
            if !used {
                self.tracks[ti].frames_missed += 1;
            }
        }
        let expiry = self.config.expiry;
        self.tracks.retain(|t| t.frames_missed <= expiry);

        det_track
            .into_iter()
            .enumerate()
            .map(|(di, assigned)| match assigned {
                Some(id) => id,
                None => {
                    let id = self.next_id;
                    self.next_id += 1;
                    self.tracks
                        .push(Track::new(id, centroids[di], frame_id, self.config.window));
                    id
                }
            })
            .collect()
    }

    /// Pushes an estimate into the track's history and returns the new
    /// smoothed value. `None` if the track no longer exists.
    pub fn update_attributes(
        &mut self,
        track_id: u64,
        estimate: AttributeEstimate,
    ) -> Option<AttributeEstimate> {
        self.get_mut(track_id).map(|t| t.push_estimate(estimate))
    }
}
