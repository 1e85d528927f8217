//! Detection metrics: IoU, per-class average precision, mAP@[.50:.95], AP50,
//! and mAR.
//!
//! Conventions are COCO-style, stated explicitly so numbers are comparable:
//! 101-point interpolated AP over the recall grid {0.00, 0.01, ..., 1.00},
//! IoU thresholds 0.50:0.05:0.95, and average recall at a 100-detection
//! budget. Matching is greedy in confidence order against the unmatched
//! ground truth of highest IoU, with all ties broken deterministically
//! (lower ids first). Classes with zero ground truth are excluded from every
//! mean.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::milhead::Detection;

/// The ten COCO IoU thresholds 0.50:0.05:0.95, built from integer ratios so
/// equality comparisons against exact-fraction IoUs behave predictably.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|k| (50 + 5 * k) as f64 / 100.0)
}

/// Number of recall points in the interpolated AP grid.
const RECALL_POINTS: usize = 101;

/// An annotated ground-truth box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    /// `[x1, y1, x2, y2]` in pixels.
    pub bbox: [f64; 4],
    pub class_index: usize,
}

impl GroundTruthBox {
    pub fn new(bbox: [f64; 4], class_index: usize) -> Result<Self> {
        if !(bbox[0] < bbox[2] && bbox[1] < bbox[3]) {
            return Err(Error::invalid_input(format!(
                "degenerate ground truth box {bbox:?}"
            )));
        }
        Ok(GroundTruthBox { bbox, class_index })
    }
}

/// Intersection-over-union of two `[x1, y1, x2, y2]` boxes.
pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> Result<f64> {
    for bx in [a, b] {
        if !(bx[0] < bx[2] && bx[1] < bx[3]) {
            return Err(Error::invalid_input(format!("degenerate box {bx:?}")));
        }
    }
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return Ok(0.0);
    }
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    Ok(inter / (area_a + area_b - inter))
}

/// 101-point interpolated average precision.
///
/// `ranked` is the TP/FP outcome sequence sorted by confidence descending
/// (ties already resolved deterministically by the caller); `n_gt` is the
/// number of ground-truth instances of the class.
pub fn average_precision(ranked: &[(f64, bool)], n_gt: usize) -> Result<f64> {
    if n_gt == 0 {
        return Err(Error::UndefinedClass(
            "average precision undefined with zero ground truth".to_string(),
        ));
    }
    if ranked.windows(2).any(|w| w[0].0 < w[1].0) {
        return Err(Error::invalid_input(
            "ranked detections must be sorted by confidence descending".to_string(),
        ));
    }
    if ranked.is_empty() {
        return Ok(0.0);
    }

    // Precision/recall after each rank.
    let mut tp = 0usize;
    let mut precisions = Vec::with_capacity(ranked.len());
    let mut recalls = Vec::with_capacity(ranked.len());
    for (rank, &(_, is_tp)) in ranked.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (rank + 1) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }

    // Precision envelope: running max from the right.
    for k in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[k] = precisions[k].max(precisions[k + 1]);
    }

    // Sample the envelope on the 101-point recall grid.
    let mut ap = 0.0;
    let mut idx = 0usize;
    for point in 0..RECALL_POINTS {
        let r = point as f64 / (RECALL_POINTS - 1) as f64;
        while idx < recalls.len() && recalls[idx] < r {
            idx += 1;
        }
        if idx < precisions.len() {
            ap += precisions[idx];
        }
    }
    Ok(ap / RECALL_POINTS as f64)
}

/// Everything the evaluator needs for one image.
#[derive(Debug, Clone)]
pub struct EvalImage {
    pub image_id: u64,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruthBox>,
}

/// Evaluator settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Per-image, per-class detection budget.
    pub max_dets: usize,
    /// Collapse all class indices to a single class before matching
    /// (class-agnostic proposal quality evaluation).
    pub class_agnostic: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            max_dets: 100,
            class_agnostic: false,
        }
    }
}

/// Metric block echoed into the report file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportConfig {
    pub iou_thresholds: Vec<f64>,
    pub max_dets: usize,
    pub class_agnostic: bool,
}

/// Aggregated detection metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean AP over IoU thresholds 0.50:0.05:0.95, then over classes.
    pub map: f64,
    /// Mean AP at IoU 0.50 over classes.
    pub ap50: f64,
    /// Mean recall at the detection budget, over thresholds and classes.
    pub mar: f64,
    /// Per-class AP averaged over IoU thresholds.
    pub per_class_ap: BTreeMap<usize, f64>,
    pub config: ReportConfig,
}

/// One detection's outcome at every IoU threshold, tagged for global
/// deterministic ranking.
struct MatchedDetection {
    confidence: f64,
    image_id: u64,
    det_index: usize,
    is_tp: Vec<bool>,
}

/// Greedy per-image, per-class matching at all thresholds.
fn match_image_class(
    dets: &[&Detection],
    gts: &[&GroundTruthBox],
    thresholds: &[f64],
    image_id: u64,
) -> Vec<MatchedDetection> {
    let mut out = Vec::with_capacity(dets.len());
    let mut gt_taken = vec![vec![false; gts.len()]; thresholds.len()];
    for (det_index, det) in dets.iter().enumerate() {
        let ious: Vec<f64> = gts
            .iter()
            .map(|gt| iou(&det.bbox, &gt.bbox).unwrap_or(0.0))
            .collect();
        let mut is_tp = Vec::with_capacity(thresholds.len());
        for (t_idx, &t) in thresholds.iter().enumerate() {
            // Highest-IoU unmatched ground truth at or above the threshold;
            // ties go to the lowest gt id.
            let mut best: Option<(usize, f64)> = None;
            for (g, &v) in ious.iter().enumerate() {
                if gt_taken[t_idx][g] || v < t {
                    continue;
                }
                if best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, _)) => {
                    gt_taken[t_idx][g] = true;
                    is_tp.push(true);
                }
                None => is_tp.push(false),
            }
        }
        out.push(MatchedDetection {
            confidence: det.confidence,
            image_id,
            det_index,
            is_tp,
        });
    }
    out
}

/// Runs COCO-style evaluation over a set of images.
pub fn evaluate(images: &[EvalImage], config: &EvalConfig) -> Result<EvalReport> {
    if config.max_dets == 0 {
        return Err(Error::invalid_config("max_dets must be positive"));
    }
    let thresholds = iou_thresholds();

    let collapse = |c: usize| if config.class_agnostic { 0 } else { c };

    // Classes that own at least one ground-truth box.
    let mut gt_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for img in images {
        for gt in &img.ground_truth {
            *gt_counts.entry(collapse(gt.class_index)).or_insert(0) += 1;
        }
    }

    // Per-image, per-class greedy matching; images are independent, and the
    // ordered collect keeps aggregation deterministic.
    type PerImage = BTreeMap<usize, Vec<MatchedDetection>>;
    let per_image: Vec<PerImage> = images
        .par_iter()
        .map(|img| {
            let mut by_class: BTreeMap<usize, (Vec<&Detection>, Vec<&GroundTruthBox>)> =
                BTreeMap::new();
            for det in &img.detections {
                let class = collapse(det.class_index);
                if gt_counts.contains_key(&class) {
                    by_class.entry(class).or_default().0.push(det);
                }
            }
            for gt in &img.ground_truth {
                by_class
                    .entry(collapse(gt.class_index))
                    .or_default()
                    .1
                    .push(gt);
            }
            let mut matched: PerImage = BTreeMap::new();
            for (class, (mut dets, gts)) in by_class {
                // Confidence descending, ties by insertion order; then the
                // per-image per-class budget.
                dets.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
                dets.truncate(config.max_dets);
                matched.insert(class, match_image_class(&dets, &gts, &thresholds, img.image_id));
            }
            matched
        })
        .collect();

    // Pool detections per class across images.
    let mut pooled: BTreeMap<usize, Vec<MatchedDetection>> = BTreeMap::new();
    for image_result in per_image {
        for (class, dets) in image_result {
            pooled.entry(class).or_default().extend(dets);
        }
    }

    let mut per_class_ap = BTreeMap::new();
    let mut ap50_sum = 0.0;
    let mut mar_sum = 0.0;
    for (&class, &n_gt) in &gt_counts {
        let mut dets = pooled.remove(&class).unwrap_or_default();
        // Global deterministic ranking: confidence desc, then image id,
        // then per-image detection index.
        dets.sort_by(|a, b| {
            b.confidence
                .partial_cmp(&a.confidence)
                .unwrap()
                .then(a.image_id.cmp(&b.image_id))
                .then(a.det_index.cmp(&b.det_index))
        });
        let mut ap_sum = 0.0;
        let mut recall_sum = 0.0;
        for (t_idx, _) in thresholds.iter().enumerate() {
            let ranked: Vec<(f64, bool)> = dets
                .iter()
                .map(|d| (d.confidence, d.is_tp[t_idx]))
                .collect();
            let ap = average_precision(&ranked, n_gt)?;
            ap_sum += ap;
            let matched = ranked.iter().filter(|(_, tp)| *tp).count();
            recall_sum += matched as f64 / n_gt as f64;
            if t_idx == 0 {
                ap50_sum += ap;
            }
        }
        per_class_ap.insert(class, ap_sum / thresholds.len() as f64);
        mar_sum += recall_sum / thresholds.len() as f64;
    }

    let n_classes = gt_counts.len().max(1) as f64;
    let map = per_class_ap.values().sum::<f64>() / n_classes;
    Ok(EvalReport {
        map,
        ap50: ap50_sum / n_classes,
        mar: mar_sum / n_classes,
        per_class_ap,
        config: ReportConfig {
            iou_thresholds: thresholds.to_vec(),
            max_dets: config.max_dets,
            class_agnostic: config.class_agnostic,
        },
    })
}
