use super::{iou, BBox, Detection, Shape};
use crate::error::{Error, Result};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    /// Mean AP over classes at IoU 0.5.
    pub map50: f64,
    /// Mean of the class-averaged AP over [`IOU_THRESHOLDS`].
    pub map5095: f64,
    /// AP at IoU 0.5 per class; `None` for classes without ground truth.
    pub ap50: [Option<f64>; 3],
}

/// Greedy matching inside one image: detections in descending confidence
/// each take the unmatched ground truth of highest IoU at or above
/// `threshold`. Returns a true-positive flag per detection.
fn match_image(dets: &[&Detection], gts: &[&BBox], threshold: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let mut taken = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    for i in order {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(j, _)| !taken[*j])
            .map(|(j, g)| (j, iou(&dets[i].bbox, g)))
            .filter(|&(_, v)| v >= threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((j, _)) = best {
            taken[j] = true;
            tp[i] = true;
        }
    }
    tp
}

/// All-points interpolated AP from `(confidence, is_tp)` pairs. Detections
/// with equal confidence enter the curve together, so the result does not
/// depend on input order.
pub fn average_precision(mut scored: Vec<(f64, bool)>, num_gt: usize) -> f64 {
    if num_gt == 0 || scored.is_empty() {
        return 0.0;
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let c = scored[i].0;
        while i < scored.len() && scored[i].0 == c {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    // Precision envelope, then area under the step curve.
    for k in (0..points.len().saturating_sub(1)).rev() {
        points[k].1 = points[k].1.max(points[k + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

fn class_ap(detections: &[Vec<Detection>], gt: &[Vec<(BBox, Shape)>], class: Shape, threshold: f64) -> Option<f64> {
    let mut scored = Vec::new();
    let mut num_gt = 0;
    for (dets, gts) in detections.iter().zip(gt) {
        let d: Vec<&Detection> = dets.iter().filter(|d| d.class == class).collect();
        let g: Vec<&BBox> = gts.iter().filter(|(_, c)| *c == class).map(|(b, _)| b).collect();
        num_gt += g.len();
        for (det, tp) in d.iter().zip(match_image(&d, &g, threshold)) {
            scored.push((det.confidence, tp));
        }
    }
    (num_gt > 0).then(|| average_precision(scored, num_gt))
}

fn mean_ap(detections: &[Vec<Detection>], gt: &[Vec<(BBox, Shape)>], threshold: f64) -> ([Option<f64>; 3], f64) {
    let aps = Shape::ALL.map(|c| class_ap(detections, gt, c, threshold));
    let present: Vec<f64> = aps.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    (aps, mean)
}

/// Box mAP of per-image detections against per-image ground truth.
pub fn evaluate_map(detections: &[Vec<Detection>], ground_truth: &[Vec<(BBox, Shape)>]) -> Result<MapReport> {
    if detections.len() != ground_truth.len() {
        return Err(Error::Contract(format!(
            "{} detection lists for {} images",
            detections.len(),
            ground_truth.len()
        )));
    }
    let (ap50, map50) = mean_ap(detections, ground_truth, 0.5);
    let map5095 = IOU_THRESHOLDS
        .iter()
        .map(|&t| mean_ap(detections, ground_truth, t).1)
        .sum::<f64>()
        / IOU_THRESHOLDS.len() as f64;
    Ok(MapReport { map50, map5095, ap50 })
}
