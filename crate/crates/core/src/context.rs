//! Body-context reasoning and RoI machinery for the detection head: the
//! fixed face-to-body spatial relation, RoI projection and max pooling,
//! training target assignment, and the joint classification/regression loss.

use crate::boxes::{decode_deltas, encode_deltas, Bbox};
use crate::error::{Error, Result};
use crate::fusion::FeatureMap;
use crate::loss::{smooth_l1, softmax_cross_entropy, IGNORE_LABEL};
use crate::tensor::Tensor;

/// The four fixed parameters linking a face box to its body-context box,
/// in the same delta parametrization used for box regression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialRelation {
    pub tx: f32,
    pub ty: f32,
    pub tw: f32,
    pub th: f32,
}

impl SpatialRelation {
    pub fn as_deltas(&self) -> [f32; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }
}

impl Default for SpatialRelation {
    /// Body twice the face width and four times its height, centered 1.5
    /// face-heights below the face center.
    fn default() -> Self {
        SpatialRelation {
            tx: 0.0,
            ty: 1.5,
            tw: std::f32::consts::LN_2,
            th: (4.0f32).ln(),
        }
    }
}

/// Derives the body box from a face box and clips it to the image; clipping
/// may shrink the box but never below a 1-pixel side.
pub fn context_box(face: &Bbox, rel: &SpatialRelation, img_w: f32, img_h: f32) -> Bbox {
    decode_deltas(face, rel.as_deltas()).clip(img_w, img_h, 1.0)
}

/// Projects an image-space box to integer bin bounds on a feature map of the
/// given stride: start = floor(coord/stride), end = ceil(coord/stride),
/// clamped to the map and widened so end > start on both axes.
/// Returns (y0, x0, y1, x1) with exclusive ends.
pub fn project_roi(
    bbox: &Bbox,
    stride: usize,
    map_h: usize,
    map_w: usize,
) -> (usize, usize, usize, usize) {
    let s = stride as f32;
    let (x1, y1, x2, y2) = bbox.corners();
    let clamp_axis = |lo: f32, hi: f32, extent: usize| -> (usize, usize) {
        let mut a = (lo.max(0.0) / s).floor() as isize;
        let mut b = (hi.max(0.0) / s).ceil() as isize;
        a = a.clamp(0, extent as isize);
        b = b.clamp(0, extent as isize);
        if b <= a {
            a = a.min(extent as isize - 1);
            b = a + 1;
        }
        (a as usize, b as usize)
    };
    let (y0, y1) = clamp_axis(y1, y2, map_h);
    let (x0, x1) = clamp_axis(x1, x2, map_w);
    (y0, x0, y1, x1)
}

/// Fixed-size descriptor pooled from one source map for one region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionKind {
    Face,
    Body,
}

#[derive(Debug, Clone)]
pub struct RoiFeature {
    /// (channels, P, P).
    pub tensor: Tensor,
    pub source: usize,
    pub region_kind: RegionKind,
}

/// Max-pools the projected region into a P x P grid. Sub-bin boundaries sit
/// at floor(i * extent / P); bins that would be empty are widened to one
/// cell at the nearest boundary. Returns flat argmax indices into the map
/// tensor for gradient routing.
pub fn roi_pool(
    map: &FeatureMap,
    bbox: &Bbox,
    p: usize,
    source: usize,
    region_kind: RegionKind,
) -> (RoiFeature, Vec<u32>) {
    assert!(p >= 1);
    let (ch, h, w) = (map.channels(), map.height(), map.width());
    let (y0, x0, y1, x1) = project_roi(bbox, map.stride, h, w);
    let (eh, ew) = (y1 - y0, x1 - x0);

    let bin_bounds = |i: usize, extent: usize, origin: usize| -> (usize, usize) {
        let mut a = origin + i * extent / p;
        let mut b = origin + (i + 1) * extent / p;
        if b <= a {
            a = a.min(origin + extent - 1);
            b = a + 1;
        }
        (a, b)
    };

    let mut out = Tensor::zeros(&[ch, p, p]);
    let mut argmax = vec![0u32; ch * p * p];
    let data = map.tensor.data();
    let plane = h * w;
    let mut oi = 0;
    for c in 0..ch {
        let base = c * plane;
        for py in 0..p {
            let (by0, by1) = bin_bounds(py, eh, y0);
            for px in 0..p {
                let (bx0, bx1) = bin_bounds(px, ew, x0);
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0usize;
                for yy in by0..by1 {
                    let row = base + yy * w;
                    for xx in bx0..bx1 {
                        let v = data[row + xx];
                        if v > best {
                            best = v;
                            best_idx = row + xx;
                        }
                    }
                }
                out.data_mut()[oi] = best;
                argmax[oi] = best_idx as u32;
                oi += 1;
            }
        }
    }
    (
        RoiFeature {
            tensor: out,
            source,
            region_kind,
        },
        argmax,
    )
}

/// Scatters pooled-feature gradients back to the source map positions that
/// won each bin's max.
pub fn roi_pool_backward(argmax: &[u32], grad_out: &[f32], grad_map: &mut Tensor) {
    debug_assert_eq!(argmax.len(), grad_out.len());
    let g = grad_map.data_mut();
    for (&idx, &gv) in argmax.iter().zip(grad_out) {
        g[idx as usize] += gv;
    }
}

/// Label and regression targets for one set of candidate boxes.
#[derive(Debug, Clone)]
pub struct AssignResult {
    /// 1 = positive, 0 = negative, IGNORE_LABEL = excluded.
    pub labels: Vec<i32>,
    /// encode_deltas(candidate, matched gt); zeros for non-positives.
    pub deltas: Vec<[f32; 4]>,
    /// Index of the matched ground truth for positives; usize::MAX otherwise.
    pub matched_gt: Vec<usize>,
}

/// Standard R-CNN assignment: a candidate is positive when its best IoU
/// reaches pos_iou or it is the best candidate for some ground truth
/// (with nonzero overlap), negative when its best IoU is below neg_iou,
/// and ignored in between. Ties break toward lower indices.
pub fn assign_targets(
    candidates: &[Bbox],
    gts: &[Bbox],
    pos_iou: f32,
    neg_iou: f32,
) -> AssignResult {
    assert!(pos_iou > neg_iou, "pos_iou must exceed neg_iou");
    let n = candidates.len();
    let mut labels = vec![0i32; n];
    let mut deltas = vec![[0.0f32; 4]; n];
    let mut matched_gt = vec![usize::MAX; n];
    if gts.is_empty() {
        return AssignResult {
            labels,
            deltas,
            matched_gt,
        };
    }

    let mut best_iou = vec![0.0f32; n];
    let mut best_gt = vec![0usize; n];
    for (i, c) in candidates.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let v = c.iou(g);
            if v > best_iou[i] {
                best_iou[i] = v;
                best_gt[i] = j;
            }
        }
    }

    for i in 0..n {
        if best_iou[i] >= pos_iou {
            labels[i] = 1;
        } else if best_iou[i] < neg_iou {
            labels[i] = 0;
        } else {
            labels[i] = IGNORE_LABEL;
        }
    }

    // Every ground truth recruits its best-overlapping candidate.
    for (j, g) in gts.iter().enumerate() {
        let mut best = 0.0f32;
        let mut best_i = usize::MAX;
        for (i, c) in candidates.iter().enumerate() {
            let v = c.iou(g);
            if v > best {
                best = v;
                best_i = i;
            }
        }
        if best_i != usize::MAX && best > 0.0 {
            labels[best_i] = 1;
            if best > best_iou[best_i] {
                best_iou[best_i] = best;
                best_gt[best_i] = j;
            }
        }
    }

    for i in 0..n {
        if labels[i] == 1 {
            matched_gt[i] = best_gt[i];
            deltas[i] = encode_deltas(&candidates[i], &gts[best_gt[i]]);
        }
    }

    AssignResult {
        labels,
        deltas,
        matched_gt,
    }
}

/// Loss parts and upstream gradients produced by [`detection_loss`].
#[derive(Debug)]
pub struct DetectionLoss {
    pub cls: f64,
    pub reg: f64,
    pub total: f64,
    pub grad_cls: Tensor,
    pub grad_reg: Tensor,
}

/// Softmax cross entropy over labeled rows plus lambda times smooth-L1 over
/// positive rows' regression deltas.
pub fn detection_loss(
    cls_logits: &Tensor,
    reg_deltas: &Tensor,
    assign: &AssignResult,
    lambda: f32,
) -> Result<DetectionLoss> {
    if lambda < 0.0 {
        return Err(Error::invalid("detection_loss", "lambda must be >= 0"));
    }
    let n = cls_logits.shape()[0];
    if assign.labels.len() != n || reg_deltas.shape() != [n, 4] {
        return Err(Error::shape(
            "detection_loss",
            format!(
                "{} labels, logits {:?}, deltas {:?}",
                assign.labels.len(),
                cls_logits.shape(),
                reg_deltas.shape()
            ),
        ));
    }
    let (cls, grad_cls) = softmax_cross_entropy(cls_logits, &assign.labels)?;

    let mut targets = Tensor::zeros(&[n, 4]);
    let mut weights = Tensor::zeros(&[n, 4]);
    for i in 0..n {
        if assign.labels[i] == 1 {
            for k in 0..4 {
                targets.data_mut()[i * 4 + k] = assign.deltas[i][k];
                weights.data_mut()[i * 4 + k] = 1.0;
            }
        }
    }
    let (reg, mut grad_reg) = smooth_l1(reg_deltas, &targets, &weights)?;
    grad_reg.data_mut().iter_mut().for_each(|g| *g *= lambda);

    Ok(DetectionLoss {
        cls,
        reg,
        total: cls + lambda as f64 * reg,
        grad_cls,
        grad_reg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_relation_reproduces_face() {
        let face = Bbox::new(20.0, 20.0, 8.0, 8.0);
        let rel = SpatialRelation {
            tx: 0.0,
            ty: 0.0,
            tw: 0.0,
            th: 0.0,
        };
        let body = decode_deltas(&face, rel.as_deltas());
        assert_eq!(body, face);
    }

    #[test]
    fn hand_case_body_from_face() {
        let face = Bbox::new(10.0, 10.0, 2.0, 2.0);
        let rel = SpatialRelation {
            tx: 0.0,
            ty: 1.5,
            tw: std::f32::consts::LN_2,
            th: (4.0f32).ln(),
        };
        let body = context_box(&face, &rel, 100.0, 100.0);
        assert!((body.cx - 10.0).abs() < 1e-5);
        assert!((body.cy - 13.0).abs() < 1e-5);
        assert!((body.w - 4.0).abs() < 1e-5);
        assert!((body.h - 8.0).abs() < 1e-5);
    }

    #[test]
    fn body_at_image_edge_is_clipped_but_valid() {
        let face = Bbox::new(32.0, 62.0, 8.0, 8.0);
        let body = context_box(&face, &SpatialRelation::default(), 64.0, 64.0);
        assert!(body.is_valid());
        let (x1, y1, x2, y2) = body.corners();
        assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 64.0 && y2 <= 64.0);
        assert!(body.w >= 1.0 && body.h >= 1.0);
    }

    #[test]
    fn context_box_commutes_with_translation() {
        // Dyadic coordinates keep the float additions exact.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rel = SpatialRelation {
            tx: 0.25,
            ty: 1.5,
            tw: 0.5,
            th: 1.0,
        };
        for _ in 0..200 {
            let q = |lo: i32, hi: i32, rng: &mut ChaCha8Rng| rng.gen_range(lo..hi) as f32 / 8.0;
            let face = Bbox::new(
                q(80, 400, &mut rng),
                q(80, 400, &mut rng),
                q(8, 200, &mut rng),
                q(8, 200, &mut rng),
            );
            let dx = q(-80, 80, &mut rng);
            let dy = q(-80, 80, &mut rng);
            let moved = Bbox::new(face.cx + dx, face.cy + dy, face.w, face.h);
            let a = decode_deltas(&moved, rel.as_deltas());
            let b = decode_deltas(&face, rel.as_deltas());
            assert_eq!(a.cx, b.cx + dx);
            assert_eq!(a.cy, b.cy + dy);
            assert_eq!(a.w, b.w);
            assert_eq!(a.h, b.h);
        }
    }

    #[test]
    fn context_box_scales_with_face() {
        let rel = SpatialRelation::default();
        let face = Bbox::new(40.0, 40.0, 6.0, 10.0);
        let double = Bbox::new(40.0, 40.0, 12.0, 20.0);
        let a = decode_deltas(&face, rel.as_deltas());
        let b = decode_deltas(&double, rel.as_deltas());
        let rel_err = |x: f32, y: f32| (x - y).abs() / y.abs().max(1e-6);
        assert!(rel_err(b.cy - double.cy, 2.0 * (a.cy - face.cy)) < 1e-6);
        assert!(rel_err(b.w, 2.0 * a.w) < 1e-6);
        assert!(rel_err(b.h, 2.0 * a.h) < 1e-6);
    }

    #[test]
    fn projection_divides_exactly_on_grid() {
        let b = Bbox::from_corners(32.0, 32.0, 96.0, 96.0);
        assert_eq!(project_roi(&b, 16, 8, 8), (2, 2, 6, 6));
    }

    #[test]
    fn tiny_box_projects_to_single_cell() {
        let b = Bbox::new(33.0, 33.0, 0.5, 0.5);
        let (y0, x0, y1, x1) = project_roi(&b, 16, 8, 8);
        assert_eq!((y1 - y0, x1 - x0), (1, 1));
    }

    #[test]
    fn stride_one_is_floor_ceil_identity() {
        let b = Bbox::from_corners(3.2, 1.7, 6.9, 4.1);
        assert_eq!(project_roi(&b, 1, 10, 10), (1, 3, 5, 7));
    }

    fn map_from(data: Vec<f32>, ch: usize, h: usize, w: usize, stride: usize) -> FeatureMap {
        FeatureMap::new(Tensor::new(&[1, ch, h, w], data).unwrap(), stride)
    }

    #[test]
    fn pool_p1_takes_max_over_rect() {
        let map = map_from((0..16).map(|v| v as f32).collect(), 1, 4, 4, 8);
        let b = Bbox::from_corners(0.0, 0.0, 32.0, 32.0);
        let (feat, argmax) = roi_pool(&map, &b, 1, 0, RegionKind::Face);
        assert_eq!(feat.tensor.shape(), &[1, 1, 1]);
        assert_eq!(feat.tensor.data(), &[15.0]);
        assert_eq!(argmax, vec![15]);
    }

    #[test]
    fn pool_constant_map_stays_constant() {
        let map = map_from(vec![2.5; 16], 1, 4, 4, 8);
        let b = Bbox::from_corners(0.0, 0.0, 32.0, 32.0);
        let (feat, _) = roi_pool(&map, &b, 2, 0, RegionKind::Face);
        assert!(feat.tensor.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn pool_p2_full_image_gives_quadrant_maxima() {
        let map = map_from((0..16).map(|v| v as f32).collect(), 1, 4, 4, 8);
        let b = Bbox::from_corners(0.0, 0.0, 32.0, 32.0);
        let (feat, _) = roi_pool(&map, &b, 2, 0, RegionKind::Face);
        assert_eq!(feat.tensor.data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn pool_p1_matches_brute_force_on_random_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let map = map_from(
            (0..64).map(|_| rng.gen_range(-5.0..5.0)).collect(),
            1,
            8,
            8,
            4,
        );
        for _ in 0..1000 {
            let cx = rng.gen_range(0.0..32.0);
            let cy = rng.gen_range(0.0..32.0);
            let w = rng.gen_range(0.5..30.0);
            let h = rng.gen_range(0.5..30.0);
            let b = Bbox::new(cx, cy, w, h);
            let (feat, _) = roi_pool(&map, &b, 1, 0, RegionKind::Face);

            let (y0, x0, y1, x1) = project_roi(&b, 4, 8, 8);
            let mut want = f32::NEG_INFINITY;
            for yy in y0..y1 {
                for xx in x0..x1 {
                    want = want.max(map.tensor.data()[yy * 8 + xx]);
                }
            }
            assert_eq!(feat.tensor.data()[0], want);
        }
    }

    #[test]
    fn pool_backward_routes_to_argmax() {
        let map = map_from((0..16).map(|v| v as f32).collect(), 1, 4, 4, 8);
        let b = Bbox::from_corners(0.0, 0.0, 32.0, 32.0);
        let (_, argmax) = roi_pool(&map, &b, 2, 0, RegionKind::Face);
        let mut grad_map = Tensor::zeros(&[1, 1, 4, 4]);
        roi_pool_backward(&argmax, &[1.0, 2.0, 3.0, 4.0], &mut grad_map);
        assert_eq!(grad_map.data()[5], 1.0);
        assert_eq!(grad_map.data()[7], 2.0);
        assert_eq!(grad_map.data()[13], 3.0);
        assert_eq!(grad_map.data()[15], 4.0);
        assert_eq!(grad_map.data().iter().filter(|&&v| v != 0.0).count(), 4);
    }

    #[test]
    fn assign_exact_match_is_positive_with_zero_deltas() {
        let gt = Bbox::new(10.0, 10.0, 5.0, 5.0);
        let result = assign_targets(&[gt], &[gt], 0.5, 0.3);
        assert_eq!(result.labels, vec![1]);
        assert_eq!(result.deltas[0], [0.0; 4]);
        assert_eq!(result.matched_gt[0], 0);
    }

    #[test]
    fn assign_disjoint_is_negative() {
        let gt = Bbox::new(10.0, 10.0, 5.0, 5.0);
        let far = Bbox::new(50.0, 50.0, 5.0, 5.0);
        let result = assign_targets(&[far], &[gt], 0.5, 0.3);
        assert_eq!(result.labels, vec![0]);
    }

    #[test]
    fn assign_between_thresholds_is_ignored() {
        // Contained box with 0.4 area ratio has IoU exactly 0.4.
        let gt = Bbox::from_corners(0.0, 0.0, 10.0, 10.0);
        let partial = Bbox::from_corners(0.0, 0.0, 10.0, 4.0);
        let other_gt = Bbox::new(500.0, 500.0, 10.0, 10.0);
        let full = Bbox::from_corners(0.0, 0.0, 10.0, 10.0);
        // `full` takes the argmax slot for gt 0, leaving `partial` between
        // the thresholds.
        let result = assign_targets(&[full, partial], &[gt, other_gt], 0.5, 0.3);
        assert!((partial.iou(&gt) - 0.4).abs() < 1e-6);
        assert_eq!(result.labels[0], 1);
        assert_eq!(result.labels[1], IGNORE_LABEL);
    }

    #[test]
    fn assign_without_gt_is_all_negative() {
        let c = Bbox::new(10.0, 10.0, 5.0, 5.0);
        let result = assign_targets(&[c, c], &[], 0.5, 0.3);
        assert_eq!(result.labels, vec![0, 0]);
    }

    #[test]
    fn assign_recruits_argmax_candidate_per_gt() {
        let gt = Bbox::new(10.0, 10.0, 8.0, 8.0);
        // Best available candidate only reaches IoU ~0.39, below pos_iou.
        let near = Bbox::new(12.0, 12.0, 8.0, 8.0);
        let far = Bbox::new(40.0, 40.0, 8.0, 8.0);
        let result = assign_targets(&[far, near], &[gt], 0.5, 0.3);
        assert_eq!(result.labels[1], 1, "argmax candidate must become positive");
        assert_eq!(result.matched_gt[1], 0);
    }

    #[test]
    fn loss_without_positives_is_classification_only() {
        let logits = Tensor::new(&[2, 2], vec![2.0, -1.0, 0.5, 0.5]).unwrap();
        let deltas = Tensor::new(&[2, 4], vec![9.0; 8]).unwrap();
        let assign = AssignResult {
            labels: vec![0, 0],
            deltas: vec![[0.0; 4]; 2],
            matched_gt: vec![usize::MAX; 2],
        };
        let out = detection_loss(&logits, &deltas, &assign, 1.0).unwrap();
        assert_eq!(out.reg, 0.0);
        assert!(out.total > 0.0);
        assert_eq!(out.total, out.cls);
        assert!(out.grad_reg.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn loss_matches_hand_summed_micro_batch() {
        // Row 0: positive with deltas off by 0.5 on one coordinate.
        // Row 1: negative classified with logits (0, 0).
        let logits = Tensor::new(&[2, 2], vec![1.0, 2.0, 0.0, 0.0]).unwrap();
        let deltas = Tensor::new(&[2, 4], vec![0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let assign = AssignResult {
            labels: vec![1, 0],
            deltas: vec![[0.0; 4]; 2],
            matched_gt: vec![0, usize::MAX],
        };
        let lambda = 2.0;
        let out = detection_loss(&logits, &deltas, &assign, lambda).unwrap();

        let e = std::f64::consts::E;
        let cls_row0 = -((e * e) / (e + e * e)).ln();
        let cls_row1 = (2.0f64).ln();
        let want_cls = 0.5 * (cls_row0 + cls_row1);
        let want_reg = 0.5 * 0.5 * 0.5; // one positive row, f(0.5) = 0.125
        assert!((out.cls - want_cls).abs() < 1e-9);
        assert!((out.reg - want_reg).abs() < 1e-9);
        assert!((out.total - (want_cls + lambda as f64 * want_reg)).abs() < 1e-6);
    }

    #[test]
    fn perfect_predictions_reach_regression_floor() {
        let logits = Tensor::new(&[1, 2], vec![-20.0, 20.0]).unwrap();
        let deltas = Tensor::new(&[1, 4], vec![0.1, -0.2, 0.3, 0.0]).unwrap();
        let assign = AssignResult {
            labels: vec![1],
            deltas: vec![[0.1, -0.2, 0.3, 0.0]],
            matched_gt: vec![0],
        };
        let out = detection_loss(&logits, &deltas, &assign, 1.0).unwrap();
        assert!(out.cls < 1e-8);
        assert!(out.reg < 1e-12);
    }
}
