//! The detection head: multi-layer RoI fusion for face and body-context
//! regions, two fully connected layers per pipeline, late fusion of the two
//! representations, and sibling classification / box-regression outputs.

use crate::boxes::Bbox;
use crate::context::{roi_pool, RegionKind, RoiFeature};
use crate::error::{Error, Result};
use crate::fusion::{self, AlignStep, FeatureMap, FuseCache};
use crate::ops;
use crate::tensor::Tensor;

/// Per-source scale vectors and the 1x1 reducer of one RoI pipeline.
#[derive(Debug)]
pub struct RoiFuseParams<'a> {
    pub gammas: Vec<&'a Tensor>,
    pub reducer_w: &'a Tensor,
    pub reducer_b: &'a Tensor,
}

#[derive(Debug)]
pub struct RoiFuseCache {
    /// Per source: pooled regions stacked to (N, C_k, P, P).
    pub pooled: Vec<Tensor>,
    /// Per source, per region: argmax indices into the source map tensor.
    pub argmax: Vec<Vec<Vec<u32>>>,
    pub fuse: FuseCache,
    pub region_kind: RegionKind,
}

#[derive(Debug)]
pub struct RoiFuseGrads {
    pub gammas: Vec<Tensor>,
    pub reducer_w: Tensor,
    pub reducer_b: Tensor,
    /// Gradients w.r.t. each source map (same shapes as the inputs).
    pub sources: Vec<Tensor>,
}

/// Pools every region from every source map and applies the
/// normalize -> rescale -> concatenate -> 1x1-reduce pipeline on the pooled
/// P x P tensors. Output is (N, reduced_channels, P, P).
pub fn roi_fuse_forward(
    sources: &[&FeatureMap],
    boxes: &[Bbox],
    p: usize,
    kind: RegionKind,
    params: &RoiFuseParams,
) -> Result<(Tensor, RoiFuseCache)> {
    if sources.is_empty() || boxes.is_empty() {
        return Err(Error::invalid("roi_fuse", "need at least one source and one region"));
    }
    let n = boxes.len();
    let mut pooled_per_source = Vec::with_capacity(sources.len());
    let mut argmax_per_source = Vec::with_capacity(sources.len());
    for (k, map) in sources.iter().enumerate() {
        let ch = map.channels();
        let mut stacked = Tensor::zeros(&[n, ch, p, p]);
        let mut region_argmax = Vec::with_capacity(n);
        for (i, bbox) in boxes.iter().enumerate() {
            let (feat, argmax) = roi_pool(map, bbox, p, k, kind);
            let len = ch * p * p;
            stacked.data_mut()[i * len..(i + 1) * len].copy_from_slice(feat.tensor.data());
            region_argmax.push(argmax);
        }
        pooled_per_source.push(stacked);
        argmax_per_source.push(region_argmax);
    }

    let shapes: Vec<Vec<usize>> = pooled_per_source.iter().map(|t| t.shape().to_vec()).collect();
    let aligned = pooled_per_source
        .iter()
        .map(|t| (t.clone(), AlignStep::Identity))
        .collect();
    let (reduced, fuse_cache) = fusion::fuse_aligned(
        aligned,
        shapes,
        &params.gammas,
        params.reducer_w,
        params.reducer_b,
    )?;
    Ok((
        reduced,
        RoiFuseCache {
            pooled: pooled_per_source,
            argmax: argmax_per_source,
            fuse: fuse_cache,
            region_kind: kind,
        },
    ))
}

pub fn roi_fuse_backward(
    cache: &RoiFuseCache,
    params: &RoiFuseParams,
    source_shapes: &[Vec<usize>],
    grad_out: &Tensor,
) -> Result<RoiFuseGrads> {
    let fuse_grads = fusion::fuse_backward(&cache.fuse, &params.gammas, params.reducer_w, grad_out)?;
    let mut source_grads = Vec::with_capacity(source_shapes.len());
    for (k, shape) in source_shapes.iter().enumerate() {
        let mut grad_map = Tensor::zeros(shape);
        let pooled_grad = &fuse_grads.inputs[k];
        let region_len = pooled_grad.numel() / cache.argmax[k].len();
        for (i, argmax) in cache.argmax[k].iter().enumerate() {
            let slice = &pooled_grad.data()[i * region_len..(i + 1) * region_len];
            crate::context::roi_pool_backward(argmax, slice, &mut grad_map);
        }
        source_grads.push(grad_map);
    }
    Ok(RoiFuseGrads {
        gammas: fuse_grads.gammas,
        reducer_w: fuse_grads.reducer_w,
        reducer_b: fuse_grads.reducer_b,
        sources: source_grads,
    })
}

/// Single-region convenience form over pre-pooled features; rejects mixed
/// region kinds.
pub fn roi_fuse_features(
    features: &[RoiFeature],
    gammas: &[&Tensor],
    reducer_w: &Tensor,
    reducer_b: &Tensor,
) -> Result<Tensor> {
    if features.is_empty() {
        return Err(Error::invalid("roi_fuse", "no features given"));
    }
    let kind = features[0].region_kind;
    if features.iter().any(|f| f.region_kind != kind) {
        return Err(Error::invalid(
            "roi_fuse",
            "cannot fuse face and body features together",
        ));
    }
    let aligned = features
        .iter()
        .map(|f| {
            let s = f.tensor.shape();
            let as4 = Tensor::new(&[1, s[0], s[1], s[2]], f.tensor.data().to_vec())
                .expect("pooled feature reshapes to 4-order");
            (as4, AlignStep::Identity)
        })
        .collect::<Vec<_>>();
    let shapes = aligned.iter().map(|(t, _)| t.shape().to_vec()).collect();
    let (reduced, _) = fusion::fuse_aligned(aligned, shapes, gammas, reducer_w, reducer_b)?;
    Ok(reduced)
}

/// Fully connected stack of one pipeline: blob -> fc -> relu -> fc -> relu.
#[derive(Debug, Clone)]
pub struct PipelineFcParams<'a> {
    pub fc1_w: &'a Tensor,
    pub fc1_b: &'a Tensor,
    pub fc2_w: &'a Tensor,
    pub fc2_b: &'a Tensor,
}

#[derive(Debug)]
pub struct HeadParams<'a> {
    pub face: PipelineFcParams<'a>,
    /// Absent when the body-context pipeline is disabled.
    pub body: Option<PipelineFcParams<'a>>,
    pub cls_w: &'a Tensor,
    pub cls_b: &'a Tensor,
    pub reg_w: &'a Tensor,
    pub reg_b: &'a Tensor,
}

#[derive(Debug)]
struct PipelineCache {
    flat: Tensor,
    pre1: Tensor,
    act1: Tensor,
    pre2: Tensor,
    act2: Tensor,
}

#[derive(Debug)]
pub struct HeadCache {
    face: PipelineCache,
    body: Option<PipelineCache>,
    joint: Tensor,
}

#[derive(Debug)]
pub struct PipelineFcGrads {
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
    pub blob: Tensor,
}

#[derive(Debug)]
pub struct HeadGrads {
    pub face: PipelineFcGrads,
    pub body: Option<PipelineFcGrads>,
    pub cls_w: Tensor,
    pub cls_b: Tensor,
    pub reg_w: Tensor,
    pub reg_b: Tensor,
}

fn flatten_rows(blob: &Tensor) -> Tensor {
    let n = blob.shape()[0];
    let d = blob.numel() / n;
    Tensor::new(&[n, d], blob.data().to_vec()).expect("flatten preserves length")
}

fn pipeline_forward(blob: &Tensor, p: &PipelineFcParams) -> Result<(Tensor, PipelineCache)> {
    let flat = flatten_rows(blob);
    let pre1 = ops::fully_connected_forward(&flat, p.fc1_w, p.fc1_b)?;
    let act1 = ops::relu_forward(&pre1);
    let pre2 = ops::fully_connected_forward(&act1, p.fc2_w, p.fc2_b)?;
    let act2 = ops::relu_forward(&pre2);
    Ok((
        act2.clone(),
        PipelineCache {
            flat,
            pre1,
            act1,
            pre2,
            act2,
        },
    ))
}

fn pipeline_backward(
    cache: &PipelineCache,
    p: &PipelineFcParams,
    grad_repr: &Tensor,
    blob_shape: &[usize],
) -> Result<PipelineFcGrads> {
    let gpre2 = ops::relu_backward(&cache.pre2, grad_repr);
    let (gact1, gfc2_w, gfc2_b) = ops::fully_connected_backward(&cache.act1, p.fc2_w, &gpre2)?;
    let gpre1 = ops::relu_backward(&cache.pre1, &gact1);
    let (gflat, gfc1_w, gfc1_b) = ops::fully_connected_backward(&cache.flat, p.fc1_w, &gpre1)?;
    let blob = Tensor::new(blob_shape, gflat.into_data()).expect("unflatten preserves length");
    Ok(PipelineFcGrads {
        fc1_w: gfc1_w,
        fc1_b: gfc1_b,
        fc2_w: gfc2_w,
        fc2_b: gfc2_b,
        blob,
    })
}

/// Runs both pipelines (body optional), concatenates their representations,
/// and emits 2 class logits plus 4 box-refinement deltas per region.
pub fn head_forward(
    face_blob: &Tensor,
    body_blob: Option<&Tensor>,
    params: &HeadParams,
) -> Result<(Tensor, Tensor, HeadCache)> {
    if body_blob.is_some() != params.body.is_some() {
        return Err(Error::invalid(
            "head_forward",
            "body blob and body parameters must both be present or both absent",
        ));
    }
    let n = face_blob.shape()[0];
    let (face_repr, face_cache) = pipeline_forward(face_blob, &params.face)?;
    let (joint, body_cache) = match (body_blob, &params.body) {
        (Some(blob), Some(bp)) => {
            if blob.shape()[0] != n {
                return Err(Error::shape(
                    "head_forward",
                    format!("face has {n} regions, body has {}", blob.shape()[0]),
                ));
            }
            let (body_repr, body_cache) = pipeline_forward(blob, bp)?;
            let fd = face_repr.shape()[1];
            let bd = body_repr.shape()[1];
            let mut joint = Tensor::zeros(&[n, fd + bd]);
            for i in 0..n {
                joint.data_mut()[i * (fd + bd)..i * (fd + bd) + fd]
                    .copy_from_slice(&face_repr.data()[i * fd..(i + 1) * fd]);
                joint.data_mut()[i * (fd + bd) + fd..(i + 1) * (fd + bd)]
                    .copy_from_slice(&body_repr.data()[i * bd..(i + 1) * bd]);
            }
            (joint, Some(body_cache))
        }
        _ => (face_repr.clone(), None),
    };
    let cls = ops::fully_connected_forward(&joint, params.cls_w, params.cls_b)?;
    let reg = ops::fully_connected_forward(&joint, params.reg_w, params.reg_b)?;
    Ok((
        cls,
        reg,
        HeadCache {
            face: face_cache,
            body: body_cache,
            joint,
        },
    ))
}

pub fn head_backward(
    cache: &HeadCache,
    params: &HeadParams,
    face_blob_shape: &[usize],
    body_blob_shape: Option<&[usize]>,
    grad_cls: &Tensor,
    grad_reg: &Tensor,
) -> Result<HeadGrads> {
    let (gjoint_cls, gcls_w, gcls_b) =
        ops::fully_connected_backward(&cache.joint, params.cls_w, grad_cls)?;
    let (gjoint_reg, greg_w, greg_b) =
        ops::fully_connected_backward(&cache.joint, params.reg_w, grad_reg)?;
    let mut gjoint = gjoint_cls;
    for (a, b) in gjoint.data_mut().iter_mut().zip(gjoint_reg.data()) {
        *a += b;
    }

    let n = cache.joint.shape()[0];
    let fd = cache.face.act2.shape()[1];
    let (gface_repr, gbody_repr) = match &cache.body {
        Some(body) => {
            let bd = body.act2.shape()[1];
            let mut gf = Tensor::zeros(&[n, fd]);
            let mut gb = Tensor::zeros(&[n, bd]);
            for i in 0..n {
                gf.data_mut()[i * fd..(i + 1) * fd]
                    .copy_from_slice(&gjoint.data()[i * (fd + bd)..i * (fd + bd) + fd]);
                gb.data_mut()[i * bd..(i + 1) * bd]
                    .copy_from_slice(&gjoint.data()[i * (fd + bd) + fd..(i + 1) * (fd + bd)]);
            }
            (gf, Some(gb))
        }
        None => (gjoint, None),
    };

    let face = pipeline_backward(&cache.face, &params.face, &gface_repr, face_blob_shape)?;
    let body = match (&cache.body, &params.body, gbody_repr, body_blob_shape) {
        (Some(bc), Some(bp), Some(gb), Some(shape)) => {
            Some(pipeline_backward(bc, bp, &gb, shape)?)
        }
        _ => None,
    };
    Ok(HeadGrads {
        face,
        body,
        cls_w: gcls_w,
        cls_b: gcls_b,
        reg_w: greg_w,
        reg_b: greg_b,
    })
}
