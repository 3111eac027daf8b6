//! Detection-proxy evaluation: run a detector over (translated) images,
//! match detections to ground truth greedily by score at an IoU threshold,
//! and summarize as a precision-recall curve with its exact interpolated
//! area (average precision).

mod blob;
mod runner;

pub use blob::{BlobDetector, BlobDetectorConfig, Detector, Polarity};
pub use runner::{evaluate_manifest, translate_one, EvalConfig, EvalError, EvalOutcome};

use serde::{Deserialize, Serialize};

use crate::data::BBox;

/// One scored detection on one image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

/// Intersection-over-union of two boxes, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = match a.intersect(b) {
        Some(i) => i.area(),
        None => 0,
    };
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Greedy matching: walk detections by descending score (ties broken by
/// earlier index), assign each to the unmatched ground truth of highest IoU
/// if that IoU clears the threshold. Returns the matched ground-truth index
/// per detection, in input order; `Some` marks a true positive.
pub fn match_detections(
    detections: &[Detection],
    ground_truth: &[BBox],
    iou_threshold: f64,
) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&i, &j| {
        detections[j]
            .score
            .partial_cmp(&detections[i].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut taken = vec![false; ground_truth.len()];
    let mut assigned = vec![None; detections.len()];
    for &di in &order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in ground_truth.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let v = iou(&detections[di].bbox, gt);
            if v >= iou_threshold {
                let better = match best {
                    None => true,
                    Some((_, bv)) => v > bv,
                };
                if better {
                    best = Some((gi, v));
                }
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
            assigned[di] = Some(gi);
        }
    }
    assigned
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PRPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Precision-recall points, one per distinct score cutoff (descending
/// score, so recall is non-decreasing along the list).
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct PRCurve {
    pub points: Vec<PRPoint>,
    pub thresholds: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct APReport {
    pub ap: f64,
    pub n_images: usize,
    pub n_gt: usize,
    pub n_detections: usize,
    pub n_skipped: usize,
    pub curve: PRCurve,
}

/// Exact area under the precision envelope over all score cutoffs.
///
/// Detections with equal scores enter the curve together (they cannot be
/// separated by any threshold). With no ground truth, an empty detection
/// set scores 1 and any detection scores 0.
pub fn average_precision(flags: &[(f64, bool)], n_gt: usize) -> APReport {
    let base = |ap: f64, curve: PRCurve, n_det: usize| APReport {
        ap,
        n_images: 0,
        n_gt,
        n_detections: n_det,
        n_skipped: 0,
        curve,
    };
    if n_gt == 0 {
        let ap = if flags.is_empty() { 1.0 } else { 0.0 };
        return base(ap, PRCurve::default(), flags.len());
    }
    if flags.is_empty() {
        return base(0.0, PRCurve::default(), 0);
    }
    let mut sorted: Vec<(f64, bool)> = flags.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));

    // one PR point per distinct score
    let mut points = Vec::new();
    let mut thresholds = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0usize;
    while i < sorted.len() {
        let cutoff = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == cutoff {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(PRPoint {
            recall: tp as f64 / n_gt as f64,
            precision: tp as f64 / (tp + fp) as f64,
        });
        thresholds.push(cutoff);
    }

    // precision envelope, then exact area
    let mut envelope = vec![0.0f64; points.len()];
    let mut running = 0.0f64;
    for k in (0..points.len()).rev() {
        running = running.max(points[k].precision);
        envelope[k] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (k, p) in points.iter().enumerate() {
        ap += (p.recall - prev_recall) * envelope[k];
        prev_recall = p.recall;
    }
    base(ap, PRCurve { points, thresholds }, sorted.len())
}
