//! The shared, internally synchronized frame store: a bounded ring of
//! frames with per-stage flags, newest-first leasing, skip/evict
//! accounting and lease timeouts.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::frame::FramePayload;
use crate::stage::StageKind;

use super::{FaceObservation, Frame, StageDescriptor, StageState};

#[derive(Debug, Error, PartialEq)]
pub enum StoreError {
    /// All buffered frames are leased; the submitted frame is dropped.
    #[error("store saturated: all {capacity} frames are in progress")]
    Saturated { capacity: usize, frame_id: u64 },
    /// The lease was force-released (timeout) or already completed.
    #[error("stale lease for frame {frame_id} stage {stage}")]
    StaleLease { frame_id: u64, stage: StageKind },
    #[error("stage {0} is not registered")]
    UnknownStage(StageKind),
    #[error("invalid stage table: {0}")]
    InvalidStages(String),
}

/// Lease on one frame for one stage. The holder is the only writer of the
/// frame until completion or force-release.
#[derive(Debug, Clone)]
pub struct FrameLease {
    pub frame: Frame,
    pub stage: StageKind,
    pub observations: Vec<FaceObservation>,
    pub epoch: u64,
}

#[derive(Debug)]
pub struct SubmitOutcome {
    pub frame_id: u64,
    pub evicted: Option<EvictedFrame>,
}

#[derive(Debug)]
pub struct EvictedFrame {
    pub frame_id: u64,
    /// Stages that were still pending when the frame was evicted.
    pub dropped_stages: Vec<StageKind>,
}

#[derive(Debug)]
pub struct CompleteOutcome {
    /// Snapshot of the frame's observations after the merge.
    pub observations: Vec<FaceObservation>,
}

#[derive(Debug)]
pub struct NextFrameOutcome {
    pub lease: Option<FrameLease>,
    /// (frame, stage) pairs skipped by this call, including cascades and
    /// lease timeouts.
    pub skipped: Vec<(u64, StageKind)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageCounters {
    pub processed: u64,
    pub skipped: u64,
    pub dropped: u64,
    pub timed_out: u64,
    pub pending_at_shutdown: u64,
}

#[derive(Debug, Clone, Default)]
pub struct StoreCounters {
    pub grabbed: u64,
    pub evictions: u64,
    pub saturated_drops: u64,
    pub per_stage: Vec<(StageKind, StageCounters)>,
}

struct FrameSlot {
    frame: Frame,
    flags: Vec<StageState>,
    epochs: Vec<u64>,
    deadlines: Vec<u64>,
    observations: Vec<FaceObservation>,
}

impl FrameSlot {
    fn any_in_progress(&self) -> bool {
        self.flags.iter().any(|&f| f == StageState::InProgress)
    }
}

struct StoreInner {
    frames: VecDeque<FrameSlot>,
    next_id: u64,
    epoch: u64,
    counters: Vec<StageCounters>,
    grabbed: u64,
    evictions: u64,
    saturated_drops: u64,
}

/// Bounded frame buffer shared by the grabber, the stage workers and the
/// controller. All operations are atomic and linearizable.
pub struct FrameStore {
    capacity: usize,
    stages: Vec<StageDescriptor>,
    /// Per stage: indices of stages that (transitively) depend on it.
    dependents: Vec<Vec<usize>>,
    lease_timeout_ns: u64,
    inner: Mutex<StoreInner>,
}

impl FrameStore {
    pub fn new(
        capacity: usize,
        stages: Vec<StageDescriptor>,
        lease_timeout_ns: u64,
    ) -> Result<Self, StoreError> {
        if capacity == 0 {
            return Err(StoreError::InvalidStages("capacity must be positive".into()));
        }
        if stages.is_empty() {
            return Err(StoreError::InvalidStages("no stages registered".into()));
        }
        for (i, s) in stages.iter().enumerate() {
            if s.worker_count == 0 {
                return Err(StoreError::InvalidStages(format!(
                    "stage {} needs at least one worker",
                    s.kind
                )));
            }
            if stages[..i].iter().any(|o| o.kind == s.kind) {
                return Err(StoreError::InvalidStages(format!(
                    "stage {} registered twice",
                    s.kind
                )));
            }
            for p in &s.prerequisites {
                if !stages.iter().any(|o| o.kind == *p) {
                    return Err(StoreError::InvalidStages(format!(
                        "stage {} requires unregistered stage {}",
                        s.kind, p
                    )));
                }
            }
        }
        for s in &stages {
            if matches!(s.kind, StageKind::Attributes | StageKind::Similarity)
                && !s.prerequisites.contains(&StageKind::Detect)
            {
                return Err(StoreError::InvalidStages(format!(
                    "stage {} must require detect",
                    s.kind
                )));
            }
        }

        // Cycle check plus transitive dependents.
        let index_of = |kind: StageKind| stages.iter().position(|s| s.kind == kind).unwrap();
        let mut dependents = vec![Vec::new(); stages.len()];
        for (i, s) in stages.iter().enumerate() {
            // Walk the prerequisite chain from stage i; a revisit of i is a cycle.
            let mut seen = vec![false; stages.len()];
            let mut stack: Vec<usize> = s.prerequisites.iter().map(|&p| index_of(p)).collect();
            while let Some(j) = stack.pop() {
                if j == i {
                    return Err(StoreError::InvalidStages("prerequisite cycle".into()));
                }
                if seen[j] {
                    continue;
                }
                seen[j] = true;
                dependents[j].push(i);
                stack.extend(stages[j].prerequisites.iter().map(|&p| index_of(p)));
            }
        }
        for deps in dependents.iter_mut() {
            deps.sort_unstable();
            deps.dedup();
        }

        let n = stages.len();
        Ok(Self {
            capacity,
            stages,
            dependents,
            lease_timeout_ns,
            inner: Mutex::new(StoreInner {
                frames: VecDeque::new(),
                next_id: 0,
                epoch: 0,
                counters: vec![StageCounters::default(); n],
                grabbed: 0,
                evictions: 0,
                saturated_drops: 0,
            }),
        })
    }

    pub fn stages(&self) -> &[StageDescriptor] {
        &self.stages
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn stage_index(&self, stage: StageKind) -> Result<usize, StoreError> {
        self.stages
            .iter()
            .position(|s| s.kind == stage)
            .ok_or(StoreError::UnknownStage(stage))
    }

    /// Appends a frame with all flags pending. When full, the oldest
    /// frame not currently leased is evicted; if every frame is leased
    /// the submission fails with `Saturated` and the frame is dropped
    /// (it still consumes an id and is counted against every stage).
    pub fn submit(
        &self,
        payload: Arc<FramePayload>,
        timestamp_ns: u64,
        now_ns: u64,
    ) -> Result<SubmitOutcome, StoreError> {
        let mut inner = self.inner.lock().unwrap();
        self.expire_leases(&mut inner, now_ns);
        let frame_id = inner.next_id;
        inner.next_id += 1;
        inner.grabbed += 1;

        let mut evicted = None;
        if inner.frames.len() == self.capacity {
            let victim_pos = inner.frames.iter().position(|s| !s.any_in_progress());
            match victim_pos {
                Some(pos) => {
                    let slot = inner.frames.remove(pos).expect("victim exists");
                    let mut dropped_stages = Vec::new();
                    for (idx, &flag) in slot.flags.iter().enumerate() {
                        if flag == StageState::Pending {
                            inner.counters[idx].dropped += 1;
                            dropped_stages.push(self.stages[idx].kind);
                        }
                    }
                    inner.evictions += 1;
                    evicted = Some(EvictedFrame {
                        frame_id: slot.frame.id,
                        dropped_stages,
                    });
                }
                None => {
                    inner.saturated_drops += 1;
                    for c in inner.counters.iter_mut() {
                        c.dropped += 1;
                    }
                    return Err(StoreError::Saturated {
                        capacity: self.capacity,
                        frame_id,
                    });
                }
            }
        }

        let n = self.stages.len();
        inner.frames.push_back(FrameSlot {
            frame: Frame {
                id: frame_id,
                timestamp_ns,
                payload,
            },
            flags: vec![StageState::Pending; n],
            epochs: vec![0; n],
            deadlines: vec![0; n],
            observations: Vec::new(),
        });
        Ok(SubmitOutcome { frame_id, evicted })
    }

    /// Leases the newest frame that is pending for `stage` with all
    /// prerequisites done. Older frames still pending for the stage are
    /// marked skipped (and their dependents cascade-skip). Lease timeouts
    /// that fired during the call are also reported as skips.
    pub fn next_frame(&self, stage: StageKind, now_ns: u64) -> Result<NextFrameOutcome, StoreError> {
        let stage_idx = self.stage_index(stage)?;
        let prereq_idx: Vec<usize> = self.stages[stage_idx]
            .prerequisites
            .iter()
            .map(|&p| self.stage_index(p).expect("validated at construction"))
            .collect();

        let mut inner = self.inner.lock().unwrap();
        let mut skips = self.expire_leases(&mut inner, now_ns);

        let chosen = inner.frames.iter().rposition(|slot| {
            slot.flags[stage_idx] == StageState::Pending
                && prereq_idx.iter().all(|&p| slot.flags[p] == StageState::Done)
        });
        let Some(pos) = chosen else {
            return Ok(NextFrameOutcome {
                lease: None,
                skipped: skips,
            });
        };

        inner.epoch += 1;
        let epoch = inner.epoch;
        {
            let slot = &mut inner.frames[pos];
            slot.flags[stage_idx] = StageState::InProgress;
            slot.epochs[stage_idx] = epoch;
            slot.deadlines[stage_idx] = now_ns.saturating_add(self.lease_timeout_ns);
        }

        for i in 0..pos {
            if inner.frames[i].flags[stage_idx] == StageState::Pending {
                self.mark_skipped(&mut inner, i, stage_idx, &mut skips);
            }
        }

        let slot = &inner.frames[pos];
        Ok(NextFrameOutcome {
            lease: Some(FrameLease {
                frame: slot.frame.clone(),
                stage,
                observations: slot.observations.clone(),
                epoch,
            }),
            skipped: skips,
        })
    }

    /// Marks the leased stage done and merges stage results into the
    /// frame's observation list, keyed by box identity. Rejects stale
    /// leases (timed out, already completed or evicted frames).
    pub fn complete(
        &self,
        frame_id: u64,
        stage: StageKind,
        epoch: u64,
        results: Vec<FaceObservation>,
        now_ns: u64,
    ) -> Result<CompleteOutcome, StoreError> {
        let stage_idx = self.stage_index(stage)?;
        let mut inner = self.inner.lock().unwrap();
        self.expire_leases(&mut inner, now_ns);

        let pos = inner
            .frames
            .iter()
            .position(|s| s.frame.id == frame_id)
            .ok_or(StoreError::StaleLease { frame_id, stage })?;
        let slot = &mut inner.frames[pos];
        if slot.flags[stage_idx] != StageState::InProgress || slot.epochs[stage_idx] != epoch {
            return Err(StoreError::StaleLease { frame_id, stage });
        }
        slot.flags[stage_idx] = StageState::Done;

        if stage == StageKind::Detect {
            slot.observations = results;
        } else {
            for result in results {
                match slot
                    .observations
                    .iter_mut()
                    .find(|o| o.bbox == result.bbox)
                {
                    Some(existing) => {
                        if result.keypoints.is_some() {
                            existing.keypoints = result.keypoints;
                        }
                        if result.transform.is_some() {
                            existing.transform = result.transform;
                        }
                        if result.attributes.is_some() {
                            existing.attributes = result.attributes;
                        }
                        if result.embedding.is_some() {
                            existing.embedding = result.embedding;
                        }
                        if result.gallery_match.is_some() {
                            existing.gallery_match = result.gallery_match;
                        }
                    }
                    None => slot.observations.push(result),
                }
            }
        }
        inner.counters[stage_idx].processed += 1;
        let observations = inner.frames[pos].observations.clone();
        Ok(CompleteOutcome { observations })
    }

    /// Force-releases a lease after a worker panic: the stage is marked
    /// skipped (terminal) and dependents cascade. Returns skip records.
    pub fn fail_lease(
        &self,
        frame_id: u64,
        stage: StageKind,
        epoch: u64,
    ) -> Vec<(u64, StageKind)> {
        let Ok(stage_idx) = self.stage_index(stage) else {
            return Vec::new();
        };
        let mut inner = self.inner.lock().unwrap();
        let mut skips = Vec::new();
        if let Some(pos) = inner.frames.iter().position(|s| s.frame.id == frame_id) {
            if inner.frames[pos].flags[stage_idx] == StageState::InProgress
                && inner.frames[pos].epochs[stage_idx] == epoch
            {
                inner.frames[pos].flags[stage_idx] = StageState::Skipped;
                inner.counters[stage_idx].skipped += 1;
                skips.push((frame_id, stage));
                self.cascade_skip(&mut inner, pos, stage_idx, &mut skips);
            }
        }
        skips
    }

    /// Lease timeouts that fired since the last call, as skip records.
    pub fn drain_timeout_skips(&self, now_ns: u64) -> Vec<(u64, StageKind)> {
        let mut inner = self.inner.lock().unwrap();
        self.expire_leases(&mut inner, now_ns)
    }

    /// True while any frame is still pending for the stage.
    pub fn has_pending(&self, stage: StageKind) -> bool {
        let Ok(stage_idx) = self.stage_index(stage) else {
            return false;
        };
        let inner = self.inner.lock().unwrap();
        inner
            .frames
            .iter()
            .any(|s| s.flags[stage_idx] == StageState::Pending)
    }

    /// Terminal counter snapshot. Frames still pending (or leased) count
    /// into `pending_at_shutdown`.
    pub fn finalize(&self) -> StoreCounters {
        let mut inner = self.inner.lock().unwrap();
        let mut counters = inner.counters.clone();
        for slot in &inner.frames {
            for (idx, &flag) in slot.flags.iter().enumerate() {
                if matches!(flag, StageState::Pending | StageState::InProgress) {
                    counters[idx].pending_at_shutdown += 1;
                }
            }
        }
        inner.counters = counters.clone();
        StoreCounters {
            grabbed: inner.grabbed,
            evictions: inner.evictions,
            saturated_drops: inner.saturated_drops,
            per_stage: self
                .stages
                .iter()
                .map(|s| s.kind)
                .zip(counters)
                .collect(),
        }
    }

    fn mark_skipped(
        &self,
        inner: &mut StoreInner,
        pos: usize,
        stage_idx: usize,
        skips: &mut Vec<(u64, StageKind)>,
    ) {
        inner.frames[pos].flags[stage_idx] = StageState::Skipped;
        inner.counters[stage_idx].skipped += 1;
        skips.push((inner.frames[pos].frame.id, self.stages[stage_idx].kind));
        self.cascade_skip(inner, pos, stage_idx, skips);
    }

    /// A skipped prerequisite makes dependent stages unreachable; they
    /// are skipped too so every frame reaches a terminal state.
    fn cascade_skip(
        &self,
        inner: &mut StoreInner,
        pos: usize,
        stage_idx: usize,
        skips: &mut Vec<(u64, StageKind)>,
    ) {
        for &dep in &self.dependents[stage_idx] {
            if inner.frames[pos].flags[dep] == StageState::Pending {
                inner.frames[pos].flags[dep] = StageState::Skipped;
                inner.counters[dep].skipped += 1;
                skips.push((inner.frames[pos].frame.id, self.stages[dep].kind));
            }
        }
    }

    /// Force-releases leases older than the timeout. The stage is marked
    /// skipped and counted as timed out; late completions become stale.
    fn expire_leases(&self, inner: &mut StoreInner, now_ns: u64) -> Vec<(u64, StageKind)> {
        let mut skips = Vec::new();
        for pos in 0..inner.frames.len() {
            for stage_idx in 0..self.stages.len() {
                if inner.frames[pos].flags[stage_idx] == StageState::InProgress
                    && inner.frames[pos].deadlines[stage_idx] < now_ns
                {
                    inner.frames[pos].flags[stage_idx] = StageState::Skipped;
                    inner.counters[stage_idx].skipped += 1;
                    inner.counters[stage_idx].timed_out += 1;
                    skips.push((inner.frames[pos].frame.id, self.stages[stage_idx].kind));
                    self.cascade_skip(inner, pos, stage_idx, &mut skips);
                }
            }
        }
        skips
    }
}
