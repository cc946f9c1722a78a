//! Region proposal network: anchor generation over the fused feature map,
//! objectness + box-delta prediction, decoding, and non-maximum suppression.

use crate::boxes::{decode_deltas, Bbox};
use crate::error::Result;
use crate::fusion::FeatureMap;
use crate::ops;
use crate::tensor::Tensor;

/// A reference box tiled at a feature-map cell.
#[derive(Debug, Clone, Copy)]
pub struct Anchor {
    pub bbox: Bbox,
    pub row: usize,
    pub col: usize,
    pub scale_index: usize,
    pub ratio_index: usize,
    /// Per-cell slot (scale_index * n_ratios + ratio_index): selects the
    /// head's channel group for this anchor.
    pub cell_slot: usize,
}

/// A decoded region candidate.
#[derive(Debug, Clone, Copy)]
pub struct Proposal {
    pub bbox: Bbox,
    pub objectness: f32,
}

/// One anchor per (cell, scale, ratio), centered on the cell. Anchor area is
/// (scale * stride)^2; the aspect ratio w/h redistributes that area.
/// Enumeration order is row-major cells, then scales, then ratios, matching
/// the head's channel layout.
pub fn generate_anchors(
    map_h: usize,
    map_w: usize,
    stride: usize,
    scales: &[f32],
    ratios: &[f32],
) -> Vec<Anchor> {
    assert!(!scales.is_empty() && !ratios.is_empty());
    let mut anchors = Vec::with_capacity(map_h * map_w * scales.len() * ratios.len());
    for row in 0..map_h {
        for col in 0..map_w {
            let cx = (col as f32 + 0.5) * stride as f32;
            let cy = (row as f32 + 0.5) * stride as f32;
            for (scale_index, &scale) in scales.iter().enumerate() {
                let side = scale * stride as f32;
                for (ratio_index, &ratio) in ratios.iter().enumerate() {
                    let w = side * ratio.sqrt();
                    let h = side / ratio.sqrt();
                    anchors.push(Anchor {
                        bbox: Bbox::new(cx, cy, w, h),
                        row,
                        col,
                        scale_index,
                        ratio_index,
                        cell_slot: scale_index * ratios.len() + ratio_index,
                    });
                }
            }
        }
    }
    anchors
}

/// Cache of the head's intermediate activations for backward.
#[derive(Debug, Clone)]
pub struct RpnHeadCache {
    pub fused: Tensor,
    pub pre_relu: Tensor,
    pub mid: Tensor,
}

/// Parameter tensors of the proposal head: a 3x3 convolution followed by two
/// sibling 1x1 convolutions for objectness logits and box deltas.
#[derive(Debug)]
pub struct RpnHeadParams<'a> {
    pub conv_w: &'a Tensor,
    pub conv_b: &'a Tensor,
    pub cls_w: &'a Tensor,
    pub cls_b: &'a Tensor,
    pub reg_w: &'a Tensor,
    pub reg_b: &'a Tensor,
}

/// Gradients for every head parameter plus the fused input map.
#[derive(Debug)]
pub struct RpnHeadGrads {
    pub fused: Tensor,
    pub conv_w: Tensor,
    pub conv_b: Tensor,
    pub cls_w: Tensor,
    pub cls_b: Tensor,
    pub reg_w: Tensor,
    pub reg_b: Tensor,
}

/// Runs the head: logits shape (1, 2A, H, W), deltas shape (1, 4A, H, W)
/// where A is anchors per cell.
pub fn rpn_forward(
    fused: &FeatureMap,
    params: &RpnHeadParams,
) -> Result<(Tensor, Tensor, RpnHeadCache)> {
    let pre_relu = ops::conv2d_forward(&fused.tensor, params.conv_w, params.conv_b, 1, 1)?;
    let mid = ops::relu_forward(&pre_relu);
    let logits = ops::conv2d_forward(&mid, params.cls_w, params.cls_b, 1, 0)?;
    let deltas = ops::conv2d_forward(&mid, params.reg_w, params.reg_b, 1, 0)?;
    Ok((
        logits,
        deltas,
        RpnHeadCache {
            fused: fused.tensor.clone(),
            pre_relu,
            mid,
        },
    ))
}

pub fn rpn_backward(
    cache: &RpnHeadCache,
    params: &RpnHeadParams,
    grad_logits: &Tensor,
    grad_deltas: &Tensor,
) -> Result<RpnHeadGrads> {
    let (gmid_cls, gcls_w, gcls_b) =
        ops::conv2d_backward(&cache.mid, params.cls_w, grad_logits, 1, 0)?;
    let (gmid_reg, greg_w, greg_b) =
        ops::conv2d_backward(&cache.mid, params.reg_w, grad_deltas, 1, 0)?;
    let mut gmid = gmid_cls;
    for (a, b) in gmid.data_mut().iter_mut().zip(gmid_reg.data()) {
        *a += b;
    }
    let gpre = ops::relu_backward(&cache.pre_relu, &gmid);
    let (gfused, gconv_w, gconv_b) =
        ops::conv2d_backward(&cache.fused, params.conv_w, &gpre, 1, 1)?;
    Ok(RpnHeadGrads {
        fused: gfused,
        conv_w: gconv_w,
        conv_b: gconv_b,
        cls_w: gcls_w,
        cls_b: gcls_b,
        reg_w: greg_w,
        reg_b: greg_b,
    })
}

/// Face probability of anchor `a` at cell (row, col): softmax over the
/// (background, face) logit pair stored in channels (2a, 2a+1).
pub fn objectness_prob(logits: &Tensor, anchor_index: usize, row: usize, col: usize) -> f32 {
    let l0 = logits.at4(0, 2 * anchor_index, row, col) as f64;
    let l1 = logits.at4(0, 2 * anchor_index + 1, row, col) as f64;
    let m = l0.max(l1);
    let e0 = (l0 - m).exp();
    let e1 = (l1 - m).exp();
    (e1 / (e0 + e1)) as f32
}

/// Greedy NMS. Returns kept indices sorted by descending score (ties broken
/// by ascending index). A box is suppressed iff its IoU with an
/// earlier-kept box strictly exceeds the threshold.
pub fn nms(dets: &[(Bbox, f32)], iou_threshold: f32) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].1
            .partial_cmp(&dets[a].1)
            .expect("nms scores must be finite")
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    'candidates: for &i in &order {
        for &k in &kept {
            if dets[k].0.iou(&dets[i].0) > iou_threshold {
                continue 'candidates;
            }
        }
        kept.push(i);
    }
    kept
}

/// Knobs for the decode -> clip -> filter -> NMS pipeline.
#[derive(Debug, Clone)]
pub struct ProposalConfig {
    pub nms_threshold: f32,
    pub pre_nms_topk: usize,
    pub post_nms_topk: usize,
    pub min_size: f32,
}

/// Decodes per-anchor deltas into clipped image-space candidates, drops
/// slivers below the minimum side, keeps the best pre_nms_topk by
/// objectness, suppresses, and returns at most post_nms_topk proposals.
pub fn propose(
    logits: &Tensor,
    deltas: &Tensor,
    anchors: &[Anchor],
    img_w: f32,
    img_h: f32,
    cfg: &ProposalConfig,
) -> Vec<Proposal> {
    debug_assert_eq!(deltas.shape()[1], logits.shape()[1] * 2);

    let mut candidates: Vec<Proposal> = Vec::new();
    for anchor in anchors {
        let idx = anchor.cell_slot;
        let t = [
            deltas.at4(0, 4 * idx, anchor.row, anchor.col),
            deltas.at4(0, 4 * idx + 1, anchor.row, anchor.col),
            deltas.at4(0, 4 * idx + 2, anchor.row, anchor.col),
            deltas.at4(0, 4 * idx + 3, anchor.row, anchor.col),
        ];
        let decoded = decode_deltas(&anchor.bbox, t);
        let clipped = decoded.clip(img_w, img_h, 0.0);
        if clipped.min_side() < cfg.min_size {
            continue;
        }
        candidates.push(Proposal {
            bbox: clipped,
            objectness: objectness_prob(logits, idx, anchor.row, anchor.col),
        });
    }

    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .objectness
            .partial_cmp(&candidates[a].objectness)
            .expect("objectness must be finite")
            .then(a.cmp(&b))
    });
    order.truncate(cfg.pre_nms_topk);

    let ranked: Vec<(Bbox, f32)> = order
        .iter()
        .map(|&i| (candidates[i].bbox, candidates[i].objectness))
        .collect();
    let kept = nms(&ranked, cfg.nms_threshold);
    kept.iter()
        .take(cfg.post_nms_topk)
        .map(|&i| candidates[order[i]])
        .collect()
}
