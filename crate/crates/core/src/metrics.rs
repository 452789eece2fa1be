//! Evaluation metrics: detection AP/mAP over IoU thresholds, MAE,
//! classification accuracy, and pipeline timing statistics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BoundingBox;
use crate::stage::{StageKind, TraceEvent, TraceEventKind};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input")]
    Empty,
}

/// Ground-truth boxes per image (single class "face").
#[derive(Debug, Clone, Default)]
pub struct GroundTruthSet {
    boxes_by_image: HashMap<String, Vec<BoundingBox>>,
}

impl GroundTruthSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_image(&mut self, image_id: impl Into<String>, boxes: Vec<BoundingBox>) {
        self.boxes_by_image.insert(image_id.into(), boxes);
    }

    pub fn total_boxes(&self) -> usize {
        self.boxes_by_image.values().map(Vec::len).sum()
    }

    pub fn boxes(&self, image_id: &str) -> &[BoundingBox] {
        self.boxes_by_image
            .get(image_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

/// One scored detection attributed to an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDetection {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
}

/// Intersection over union of two positive-area boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix0 = a.x.max(b.x);
    let iy0 = a.y.max(b.y);
    let ix1 = (a.x + a.w).min(b.x + b.w);
    let iy1 = (a.y + a.h).min(b.y + b.h);
    let inter = (ix1 - ix0).max(0.0) * (iy1 - iy0).max(0.0);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Average precision at one IoU threshold.
///
/// Detections are ranked by descending score globally (stable on ties);
/// each detection greedily matches the unmatched ground-truth box with the
/// highest IoU at or above the threshold within the same image. The
/// precision/recall curve is integrated with the all-points interpolation
/// (precision envelope).
pub fn average_precision(
    detections: &[ScoredDetection],
    gt: &GroundTruthSet,
    iou_threshold: f64,
) -> f64 {
    let total_gt = gt.total_boxes();
    if total_gt == 0 {
        return if detections.is_empty() { 1.0 } else { 0.0 };
    }
    if detections.is_empty() {
        return 0.0;
    }

    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));

    let mut matched: HashMap<&str, Vec<bool>> = HashMap::new();
    let mut tp_flags = Vec::with_capacity(order.len());
    for &idx in &order {
        let det = &detections[idx];
        let gt_boxes = gt.boxes(&det.image_id);
        let used = matched
            .entry(det.image_id.as_str())
            .or_insert_with(|| vec![false; gt_boxes.len()]);
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gt_boxes.iter().enumerate() {
            if used[gi] {
                continue;
            }
            let overlap = iou(&det.bbox, g);
            if overlap >= iou_threshold && best.map_or(true, |(_, b)| overlap > b) {
                best = Some((gi, overlap));
            }
        }
        match best {
            Some((gi, _)) => {
                used[gi] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }

    // Cumulative precision/recall points.
    let mut points = Vec::with_capacity(tp_flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &is_tp in &tp_flags {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((
            tp as f64 / total_gt as f64,
            tp as f64 / (tp + fp) as f64,
        ));
    }

    // Precision envelope and area under the curve.
    let mut ap = 0.0;
    let mut max_prec = 0.0;
    let mut idx = points.len();
    let mut segments = Vec::with_capacity(points.len());
    while idx > 0 {
        idx -= 1;
        let (recall, precision) = points[idx];
        max_prec = max_prec.max(precision);
        segments.push((recall, max_prec));
    }
    segments.reverse();
    let mut prev_recall = 0.0;
    for (recall, envelope) in segments {
        if recall > prev_recall {
            ap += (recall - prev_recall) * envelope;
            prev_recall = recall;
        }
    }
    ap
}

/// The ten COCO-style IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// `(ap_50_95, ap_50)`: the mean AP over the ten COCO thresholds and the
/// AP at IoU 0.5.
pub fn coco_style_ap(detections: &[ScoredDetection], gt: &GroundTruthSet) -> (f64, f64) {
    let thresholds = coco_iou_thresholds();
    let aps: Vec<f64> = thresholds
        .iter()
        .map(|&t| average_precision(detections, gt, t))
        .collect();
    let mean = aps.iter().sum::<f64>() / aps.len() as f64;
    (mean, aps[0])
}

/// Mean AP over a class list. With the single "face" class this equals
/// the class AP; kept general for multi-class inputs.
pub fn mean_average_precision(
    per_class: &[(&[ScoredDetection], &GroundTruthSet)],
    iou_threshold: f64,
) -> f64 {
    if per_class.is_empty() {
        return 0.0;
    }
    let sum: f64 = per_class
        .iter()
        .map(|(dets, gt)| average_precision(dets, gt, iou_threshold))
        .sum();
    sum / per_class.len() as f64
}

/// Mean absolute error between predictions and truths.
pub fn mae(predictions: &[f64], truths: &[f64]) -> Result<f64, MetricsError> {
    if predictions.len() != truths.len() {
        return Err(MetricsError::LengthMismatch {
            left: predictions.len(),
            right: truths.len(),
        });
    }
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    let sum: f64 = predictions
        .iter()
        .zip(truths.iter())
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(sum / predictions.len() as f64)
}

/// Fraction of positions where the labels agree.
pub fn accuracy<L: PartialEq>(predicted: &[L], truth: &[L]) -> Result<f64, MetricsError> {
    if predicted.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            left: predicted.len(),
            right: truth.len(),
        });
    }
    if predicted.is_empty() {
        return Err(MetricsError::Empty);
    }
    let matches = predicted
        .iter()
        .zip(truth.iter())
        .filter(|(p, t)| p == t)
        .count();
    Ok(matches as f64 / predicted.len() as f64)
}

/// Latency and throughput summary for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub count: usize,
    pub mean_ns: f64,
    pub p50_ns: u64,
    pub p95_ns: u64,
    pub p99_ns: u64,
    /// processed count / wall-clock span from first start to last done.
    pub fps: f64,
    pub span_ns: u64,
}

impl TimingStats {
    pub fn from_latencies(mut latencies: Vec<u64>, span_ns: u64) -> Self {
        let count = latencies.len();
        if count == 0 {
            return Self {
                count: 0,
                mean_ns: 0.0,
                p50_ns: 0,
                p95_ns: 0,
                p99_ns: 0,
                fps: 0.0,
                span_ns,
            };
        }
        latencies.sort_unstable();
        let mean_ns = latencies.iter().map(|&l| l as f64).sum::<f64>() / count as f64;
        let fps = if span_ns == 0 {
            0.0
        } else {
            count as f64 / (span_ns as f64 / 1e9)
        };
        Self {
            count,
            mean_ns,
            p50_ns: nearest_rank(&latencies, 0.50),
            p95_ns: nearest_rank(&latencies, 0.95),
            p99_ns: nearest_rank(&latencies, 0.99),
            fps,
            span_ns,
        }
    }
}

/// Nearest-rank percentile on a sorted sample: element at ceil(q*n).
pub fn nearest_rank(sorted: &[u64], q: f64) -> u64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    let rank = (q * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Per-stage timing derived from a trace event stream. Orphan events
/// (done without start, start without done) are counted, not fatal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub stages: Vec<(StageKind, TimingStats)>,
    pub orphan_events: usize,
}

pub fn timing_stats(events: &[TraceEvent]) -> TimingReport {
    let mut open: HashMap<(u64, StageKind), u64> = HashMap::new();
    let mut latencies: HashMap<StageKind, Vec<u64>> = HashMap::new();
    let mut first_start: HashMap<StageKind, u64> = HashMap::new();
    let mut last_done: HashMap<StageKind, u64> = HashMap::new();
    let mut orphans = 0usize;

    for ev in events {
        match (ev.event, ev.stage) {
            (TraceEventKind::StageStart, Some(stage)) => {
                if open.insert((ev.frame_id, stage), ev.t_ns).is_some() {
                    orphans += 1;
                }
                first_start
                    .entry(stage)
                    .and_modify(|t| *t = (*t).min(ev.t_ns))
                    .or_insert(ev.t_ns);
            }
            (TraceEventKind::StageDone, Some(stage)) => {
                match open.remove(&(ev.frame_id, stage)) {
                    Some(start) => {
                        latencies
                            .entry(stage)
                            .or_default()
                            .push(ev.t_ns.saturating_sub(start));
                        last_done
                            .entry(stage)
                            .and_modify(|t| *t = (*t).max(ev.t_ns))
                            .or_insert(ev.t_ns);
                    }
                    None => orphans += 1,
                }
            }
            _ => {}
        }
    }
    orphans += open.len();

    let stages = StageKind::ALL
        .iter()
        .filter_map(|&stage| {
            let lats = latencies.remove(&stage)?;
            let span = match (first_start.get(&stage), last_done.get(&stage)) {
                (Some(&s), Some(&d)) => d.saturating_sub(s),
                _ => 0,
            };
            Some((stage, TimingStats::from_latencies(lats, span)))
        })
        .collect();

    TimingReport {
        stages,
        orphan_events: orphans,
    }
}
