//! Detection evaluation: score-ranked greedy matching against ground truth,
//! precision-recall curves, and average precision under all-points
//! interpolation.

use crate::boxes::Bbox;
use std::collections::HashMap;

/// A scored box attributed to one image.
#[derive(Debug, Clone)]
pub struct Detection {
    pub image_id: String,
    pub bbox: Bbox,
    pub score: f32,
}

/// One operating point per detection, swept in descending score order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrPoint {
    pub threshold: f32,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub ap: f64,
}

/// Processes detections in globally descending score order (ties by index).
/// A detection is a true positive iff its best-IoU *unmatched* ground truth
/// in the same image overlaps strictly above the threshold; that ground
/// truth is then consumed. Returns (detection index, is_tp) in rank order.
pub fn match_detections(
    detections: &[Detection],
    ground_truth: &HashMap<String, Vec<Bbox>>,
    iou_threshold: f32,
) -> Vec<(usize, bool)> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .expect("detection scores must be finite")
            .then(a.cmp(&b))
    });

    let mut consumed: HashMap<&str, Vec<bool>> = ground_truth
        .iter()
        .map(|(k, v)| (k.as_str(), vec![false; v.len()]))
        .collect();

    let mut flags = Vec::with_capacity(order.len());
    for &i in &order {
        let det = &detections[i];
        let tp = match ground_truth.get(&det.image_id) {
            None => false,
            Some(gts) => {
                let used = consumed.get_mut(det.image_id.as_str()).unwrap();
                let mut best_iou = 0.0f32;
                let mut best_j = usize::MAX;
                for (j, gt) in gts.iter().enumerate() {
                    if used[j] {
                        continue;
                    }
                    let v = det.bbox.iou(gt);
                    if v > best_iou {
                        best_iou = v;
                        best_j = j;
                    }
                }
                if best_j != usize::MAX && best_iou > iou_threshold {
                    used[best_j] = true;
                    true
                } else {
                    false
                }
            }
        };
        flags.push((i, tp));
    }
    flags
}

/// Cumulative precision/recall swept over the ranked flags. `scores` must be
/// aligned with `ranked` (descending).
pub fn pr_curve(ranked_flags: &[bool], scores: &[f32], num_gt: usize) -> PrCurve {
    assert_eq!(ranked_flags.len(), scores.len());
    if num_gt == 0 {
        return PrCurve {
            points: Vec::new(),
            ap: 0.0,
        };
    }
    let mut points = Vec::with_capacity(ranked_flags.len());
    let mut tp = 0usize;
    let mut fp = 0usize;
    for (k, &is_tp) in ranked_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push(PrPoint {
            threshold: scores[k],
            recall: tp as f64 / num_gt as f64,
            precision: tp as f64 / (tp + fp) as f64,
        });
    }
    let ap = average_precision(&points);
    PrCurve { points, ap }
}

/// Exact area under the PR curve with the precision envelope made monotone
/// non-increasing from the right (all-points interpolation).
pub fn average_precision(points: &[PrPoint]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let mut envelope: Vec<f64> = points.iter().map(|p| p.precision).collect();
    for k in (0..envelope.len() - 1).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0f64;
    let mut prev_recall = 0.0f64;
    for (k, p) in points.iter().enumerate() {
        if p.recall > prev_recall {
            ap += (p.recall - prev_recall) * envelope[k];
            prev_recall = p.recall;
        }
    }
    ap
}

/// Serializes a curve as `threshold,recall,precision` rows with a trailing
/// `# AP=<value>` line.
pub fn curve_to_csv(curve: &PrCurve) -> String {
    let mut out = String::from("threshold,recall,precision\n");
    for p in &curve.points {
        out.push_str(&format!("{},{:.6},{:.6}\n", p.threshold, p.recall, p.precision));
    }
    out.push_str(&format!("# AP={:.6}\n", curve.ap));
    out
}
