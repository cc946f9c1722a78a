//! Full detector assembly: a configurable conv backbone feeding three
//! source maps, the fused proposal path, and the two-pipeline context head,
//! all over one flat parameter arena.

use crate::boxes::{decode_deltas, Bbox};
use crate::config::{Config, ScaleMode};
use crate::context::{context_box, roi_pool, RegionKind};
use crate::error::{Error, Result};
use crate::fusion::{self, FeatureMap, FuseCache};
use crate::head::{
    self, HeadCache, HeadGrads, HeadParams, PipelineFcParams, RoiFuseCache, RoiFuseParams,
};
use crate::ops;
use crate::pgm::GrayImage;
use crate::proposal::{self, Anchor, Proposal, ProposalConfig, RpnHeadParams};
use crate::tensor::{xavier_uniform, ParamId, Params, Tensor};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct BackboneSet {
    pool: bool,
    convs: Vec<ConvIds>,
}

#[derive(Debug, Clone)]
struct FusionIds {
    gammas: [ParamId; 3],
    reducer: ConvIds,
}

#[derive(Debug, Clone)]
struct FcIds {
    fc1: ConvIds,
    fc2: ConvIds,
}

#[derive(Debug)]
pub struct Model {
    pub cfg: Config,
    pub params: Params,
    backbone: Vec<BackboneSet>,
    source_strides: [usize; 3],
    rpn_fusion: FusionIds,
    rpn_conv: ConvIds,
    rpn_cls: ConvIds,
    rpn_reg: ConvIds,
    face_roi: FusionIds,
    body_roi: Option<FusionIds>,
    face_fc: FcIds,
    body_fc: Option<FcIds>,
    out_cls: ConvIds,
    out_reg: ConvIds,
}

/// Maps 8-bit pixels to [-1, 1).
pub fn image_to_tensor(img: &GrayImage) -> Tensor {
    Tensor::new(
        &[1, 1, img.height, img.width],
        img.pixels.iter().map(|&v| v as f32 / 127.5 - 1.0).collect(),
    )
    .expect("raster length matches dimensions")
}

/// Caches produced by one backbone pass.
#[derive(Debug)]
pub struct BackboneCache {
    /// Per set: entry-pool argmax and pre-pool shape, when pooled.
    pools: Vec<Option<(Vec<u32>, Vec<usize>)>>,
    /// Per set, per conv: (input, pre-relu output).
    convs: Vec<Vec<(Tensor, Tensor)>>,
}

impl Model {
    pub fn new(cfg: &Config, warmup: Option<&Tensor>) -> Result<Self> {
        cfg.validate()?;
        let mut params = Params::new();
        let mut rng = crate::synth::derive_rng(cfg.seed, "init", 0);

        let widths = &cfg.backbone.widths;
        let mut backbone = Vec::with_capacity(widths.len());
        let mut in_ch = 1usize;
        for (set_idx, (&width, &repeats)) in widths
            .iter()
            .zip(&cfg.backbone.repeats)
            .enumerate()
        {
            let pool = set_idx > 0 || cfg.backbone.pool_first;
            let mut convs = Vec::with_capacity(repeats);
            for conv_idx in 0..repeats {
                let w = register_conv(
                    &mut params,
                    &format!("backbone.set{set_idx}.conv{conv_idx}"),
                    width,
                    in_ch,
                    3,
                    &mut rng,
                );
                convs.push(w);
                in_ch = width;
            }
            backbone.push(BackboneSet { pool, convs });
        }

        let strides = cfg.backbone.strides();
        let sources = cfg.backbone.source_sets();
        let source_strides = [
            strides[sources[0]],
            strides[sources[1]],
            strides[sources[2]],
        ];
        let source_widths = [
            widths[sources[0]],
            widths[sources[1]],
            widths[sources[2]],
        ];
        let concat_ch: usize = source_widths.iter().sum();

        let rpn_fusion = register_fusion(
            &mut params,
            "fusion.rpn",
            &source_widths,
            &cfg.fusion_rpn_scales,
            concat_ch,
            cfg.fusion_reducer_channels,
            &mut rng,
        );

        let rc = cfg.fusion_reducer_channels;
        let anchors_per_cell = cfg.anchor_scales.len() * cfg.anchor_ratios.len();
        let rpn_conv = register_conv(&mut params, "rpn.conv", rc, rc, 3, &mut rng);
        let rpn_cls = register_conv(&mut params, "rpn.cls", 2 * anchors_per_cell, rc, 1, &mut rng);
        let rpn_reg = register_conv(&mut params, "rpn.reg", 4 * anchors_per_cell, rc, 1, &mut rng);

        let face_roi = register_fusion(
            &mut params,
            "roi.face",
            &source_widths,
            &cfg.fusion_roi_scales,
            concat_ch,
            rc,
            &mut rng,
        );
        let body_roi = cfg.context_enabled.then(|| {
            register_fusion(
                &mut params,
                "roi.body",
                &source_widths,
                &cfg.fusion_roi_scales,
                concat_ch,
                rc,
                &mut rng,
            )
        });

        let blob_dim = rc * cfg.roi_pool_size * cfg.roi_pool_size;
        let face_fc = register_fc_pipeline(&mut params, "head.face", blob_dim, cfg.head_fc_dim, &mut rng);
        let body_fc = cfg
            .context_enabled
            .then(|| register_fc_pipeline(&mut params, "head.body", blob_dim, cfg.head_fc_dim, &mut rng));

        let joint = cfg.head_fc_dim * if cfg.context_enabled { 2 } else { 1 };
        let out_cls = register_fc(&mut params, "head.cls", 2, joint, &mut rng);
        let out_reg = register_fc(&mut params, "head.reg", 4, joint, &mut rng);

        let mut model = Model {
            cfg: cfg.clone(),
            params,
            backbone,
            source_strides,
            rpn_fusion,
            rpn_conv,
            rpn_cls,
            rpn_reg,
            face_roi,
            body_roi,
            face_fc,
            body_fc,
            out_cls,
            out_reg,
        };

        if cfg.fusion_scale_mode == ScaleMode::Warmup {
            if let Some(image) = warmup {
                model.rescale_gammas_from_warmup(image)?;
            }
        }
        Ok(model)
    }

    /// Applies the two published initialization rules to a non-standard
    /// backbone: per-channel scales proportional to sqrt(channels) (equal
    /// average scale per map), with the constant set by the measured RMS
    /// activation of the deepest source, whole-map for the proposal path
    /// and RoI-pooled for the head paths.
    fn rescale_gammas_from_warmup(&mut self, image: &Tensor) -> Result<()> {
        let (sources, _) = self.backbone_forward(image)?;
        let deepest = &sources[2];

        let rms = |t: &Tensor| -> f32 {
            let sum: f64 = t.data().iter().map(|&v| (v as f64).powi(2)).sum();
            ((sum / t.numel() as f64).sqrt() as f32).max(1e-3)
        };
        let s_rpn = rms(&deepest.tensor);

        let img_w = image.shape()[3] as f32;
        let img_h = image.shape()[2] as f32;
        let p = self.cfg.roi_pool_size;
        let probes = [
            Bbox::from_corners(0.0, 0.0, img_w, img_h),
            Bbox::from_corners(0.0, 0.0, img_w / 2.0, img_h / 2.0),
            Bbox::from_corners(img_w / 2.0, img_h / 2.0, img_w, img_h),
            Bbox::from_corners(img_w / 4.0, img_h / 4.0, 3.0 * img_w / 4.0, 3.0 * img_h / 4.0),
        ];
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for probe in &probes {
            let (feat, _) = roi_pool(deepest, probe, p, 2, RegionKind::Face);
            sum += feat
                .tensor
                .data()
                .iter()
                .map(|&v| (v as f64).powi(2))
                .sum::<f64>();
            count += feat.tensor.numel();
        }
        let s_roi = (((sum / count.max(1) as f64).sqrt()) as f32).max(1e-3);

        let widths: Vec<usize> = sources.iter().map(|s| s.channels()).collect();
        for (k, &ch) in widths.iter().enumerate() {
            let gamma_rpn = s_rpn * (ch as f32).sqrt();
            let id = self.rpn_fusion.gammas[k];
            self.params
                .get_mut(id)
                .value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = gamma_rpn);

            let gamma_roi = s_roi * (ch as f32).sqrt();
            for ids in [Some(&self.face_roi), self.body_roi.as_ref()]
                .into_iter()
                .flatten()
            {
                self.params
                    .get_mut(ids.gammas[k])
                    .value
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = gamma_roi);
            }
        }
        Ok(())
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.cfg.anchor_scales.len() * self.cfg.anchor_ratios.len()
    }

    pub fn fused_stride(&self) -> usize {
        self.source_strides[2]
    }

    /// Runs the conv sets and returns the three source maps (the outputs of
    /// the last three sets) plus everything backward needs.
    pub fn backbone_forward(&self, image: &Tensor) -> Result<(Vec<FeatureMap>, BackboneCache)> {
        let mut pools = Vec::with_capacity(self.backbone.len());
        let mut conv_caches = Vec::with_capacity(self.backbone.len());
        let mut outputs = Vec::with_capacity(self.backbone.len());
        let mut current = image.clone();
        for set in &self.backbone {
            let pool_cache = if set.pool {
                let shape = current.shape().to_vec();
                let (pooled, argmax) = ops::max_pool2d_forward(&current, 2, 2)?;
                current = pooled;
                Some((argmax, shape))
            } else {
                None
            };
            pools.push(pool_cache);
            let mut set_convs = Vec::with_capacity(set.convs.len());
            for ids in &set.convs {
                let input = current;
                let pre = ops::conv2d_forward(
                    &input,
                    self.params.value(ids.w),
                    self.params.value(ids.b),
                    1,
                    1,
                )?;
                current = ops::relu_forward(&pre);
                set_convs.push((input, pre));
            }
            conv_caches.push(set_convs);
            outputs.push(current.clone());
        }

        let sources = self.cfg.backbone.source_sets();
        let maps = sources
            .iter()
            .zip(self.source_strides.iter())
            .map(|(&set_idx, &stride)| FeatureMap::new(outputs[set_idx].clone(), stride))
            .collect();
        Ok((
            maps,
            BackboneCache {
                pools,
                convs: conv_caches,
            },
        ))
    }

    /// Accumulates parameter gradients from per-source-map gradients and
    /// discards the gradient at the image.
    pub fn backbone_backward(
        &mut self,
        cache: &BackboneCache,
        source_grads: [Tensor; 3],
    ) -> Result<()> {
        let sources = self.cfg.backbone.source_sets();
        let n = self.backbone.len();
        let mut incoming: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        for (slot, &set_idx) in sources.iter().enumerate() {
            let g = &source_grads[slot];
            match &mut incoming[set_idx] {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                entry @ None => *entry = Some(g.clone()),
            }
        }

        let mut grad_from_next: Option<Tensor> = None;
        for set_idx in (0..n).rev() {
            let set = &self.backbone[set_idx];
            let mut grad_out = match (incoming[set_idx].take(), grad_from_next.take()) {
                (Some(mut a), Some(b)) => {
                    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += y;
                    }
                    a
                }
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => {
                    return Err(Error::invalid(
                        "backbone_backward",
                        format!("no gradient reaches set {set_idx}"),
                    ))
                }
            };

            for (conv_pos, ids) in set.convs.iter().enumerate().rev() {
                let (input, pre) = &cache.convs[set_idx][conv_pos];
                let gpre = ops::relu_backward(pre, &grad_out);
                let (gin, gw, gb) =
                    ops::conv2d_backward(input, self.params.value(ids.w), &gpre, 1, 1)?;
                self.params.add_grad(ids.w, &gw);
                self.params.add_grad(ids.b, &gb);
                grad_out = gin;
            }

            if let Some((argmax, in_shape)) = &cache.pools[set_idx] {
                grad_out = ops::max_pool2d_backward(argmax, &grad_out, in_shape);
            }
            if set_idx > 0 {
                grad_from_next = Some(grad_out);
            }
        }
        Ok(())
    }

    fn fusion_gamma_refs(&self, ids: &FusionIds) -> Vec<&Tensor> {
        ids.gammas.iter().map(|&g| self.params.value(g)).collect()
    }

    pub fn rpn_fuse_forward(&self, sources: &[FeatureMap]) -> Result<(FeatureMap, FuseCache)> {
        let refs: Vec<&FeatureMap> = sources.iter().collect();
        let gammas = self.fusion_gamma_refs(&self.rpn_fusion);
        fusion::fuse(
            &refs,
            &gammas,
            self.params.value(self.rpn_fusion.reducer.w),
            self.params.value(self.rpn_fusion.reducer.b),
        )
    }

    /// Backward through the proposal-path fusion; returns per-source grads.
    pub fn rpn_fuse_backward(
        &mut self,
        cache: &FuseCache,
        grad_fused: &Tensor,
    ) -> Result<[Tensor; 3]> {
        let gammas: Vec<Tensor> = self
            .rpn_fusion
            .gammas
            .iter()
            .map(|&g| self.params.value(g).clone())
            .collect();
        let gamma_refs: Vec<&Tensor> = gammas.iter().collect();
        let grads = fusion::fuse_backward(
            cache,
            &gamma_refs,
            self.params.value(self.rpn_fusion.reducer.w),
            grad_fused,
        )?;
        for (k, g) in grads.gammas.iter().enumerate() {
            self.params.add_grad(self.rpn_fusion.gammas[k], g);
        }
        self.params.add_grad(self.rpn_fusion.reducer.w, &grads.reducer_w);
        self.params.add_grad(self.rpn_fusion.reducer.b, &grads.reducer_b);
        let mut it = grads.inputs.into_iter();
        Ok([
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
        ])
    }

    fn rpn_head_params(&self) -> RpnHeadParams<'_> {
        RpnHeadParams {
            conv_w: self.params.value(self.rpn_conv.w),
            conv_b: self.params.value(self.rpn_conv.b),
            cls_w: self.params.value(self.rpn_cls.w),
            cls_b: self.params.value(self.rpn_cls.b),
            reg_w: self.params.value(self.rpn_reg.w),
            reg_b: self.params.value(self.rpn_reg.b),
        }
    }

    pub fn rpn_head_forward(
        &self,
        fused: &FeatureMap,
    ) -> Result<(Tensor, Tensor, proposal::RpnHeadCache)> {
        proposal::rpn_forward(fused, &self.rpn_head_params())
    }

    pub fn rpn_head_backward(
        &mut self,
        cache: &proposal::RpnHeadCache,
        grad_logits: &Tensor,
        grad_deltas: &Tensor,
    ) -> Result<Tensor> {
        let grads = {
            let params = self.rpn_head_params();
            proposal::rpn_backward(cache, &params, grad_logits, grad_deltas)?
        };
        self.params.add_grad(self.rpn_conv.w, &grads.conv_w);
        self.params.add_grad(self.rpn_conv.b, &grads.conv_b);
        self.params.add_grad(self.rpn_cls.w, &grads.cls_w);
        self.params.add_grad(self.rpn_cls.b, &grads.cls_b);
        self.params.add_grad(self.rpn_reg.w, &grads.reg_w);
        self.params.add_grad(self.rpn_reg.b, &grads.reg_b);
        Ok(grads.fused)
    }

    pub fn make_anchors(&self, map_h: usize, map_w: usize) -> Vec<Anchor> {
        proposal::generate_anchors(
            map_h,
            map_w,
            self.fused_stride(),
            &self.cfg.anchor_scales,
            &self.cfg.anchor_ratios,
        )
    }

    pub fn proposal_config(&self) -> ProposalConfig {
        ProposalConfig {
            nms_threshold: self.cfg.rpn_nms_threshold,
            pre_nms_topk: self.cfg.rpn_pre_nms_topk,
            post_nms_topk: self.cfg.rpn_post_nms_topk,
            min_size: self.cfg.rpn_min_size,
        }
    }

    fn roi_params<'a>(&'a self, ids: &'a FusionIds) -> RoiFuseParams<'a> {
        RoiFuseParams {
            gammas: self.fusion_gamma_refs(ids),
            reducer_w: self.params.value(ids.reducer.w),
            reducer_b: self.params.value(ids.reducer.b),
        }
    }

    pub fn roi_blob_forward(
        &self,
        sources: &[FeatureMap],
        boxes: &[Bbox],
        kind: RegionKind,
    ) -> Result<(Tensor, RoiFuseCache)> {
        let ids = match kind {
            RegionKind::Face => &self.face_roi,
            RegionKind::Body => self.body_roi.as_ref().ok_or_else(|| {
                Error::invalid("roi_blob_forward", "body pipeline is disabled")
            })?,
        };
        let refs: Vec<&FeatureMap> = sources.iter().collect();
        head::roi_fuse_forward(
            &refs,
            boxes,
            self.cfg.roi_pool_size,
            kind,
            &self.roi_params(ids),
        )
    }

    /// Backward through one RoI pipeline; returns per-source grads.
    pub fn roi_blob_backward(
        &mut self,
        cache: &RoiFuseCache,
        kind: RegionKind,
        source_shapes: &[Vec<usize>],
        grad_blob: &Tensor,
    ) -> Result<[Tensor; 3]> {
        let ids = match kind {
            RegionKind::Face => self.face_roi.clone(),
            RegionKind::Body => self
                .body_roi
                .clone()
                .ok_or_else(|| Error::invalid("roi_blob_backward", "body pipeline is disabled"))?,
        };
        let gammas: Vec<Tensor> = ids
            .gammas
            .iter()
            .map(|&g| self.params.value(g).clone())
            .collect();
        let gamma_refs: Vec<&Tensor> = gammas.iter().collect();
        let params = RoiFuseParams {
            gammas: gamma_refs,
            reducer_w: self.params.value(ids.reducer.w),
            reducer_b: self.params.value(ids.reducer.b),
        };
        let grads = head::roi_fuse_backward(cache, &params, source_shapes, grad_blob)?;
        for (k, g) in grads.gammas.iter().enumerate() {
            self.params.add_grad(ids.gammas[k], g);
        }
        self.params.add_grad(ids.reducer.w, &grads.reducer_w);
        self.params.add_grad(ids.reducer.b, &grads.reducer_b);
        let mut it = grads.sources.into_iter();
        Ok([
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
        ])
    }

    fn fc_refs<'a>(&'a self, ids: &FcIds) -> PipelineFcParams<'a> {
        PipelineFcParams {
            fc1_w: self.params.value(ids.fc1.w),
            fc1_b: self.params.value(ids.fc1.b),
            fc2_w: self.params.value(ids.fc2.w),
            fc2_b: self.params.value(ids.fc2.b),
        }
    }

    fn head_params(&self) -> HeadParams<'_> {
        HeadParams {
            face: self.fc_refs(&self.face_fc),
            body: self.body_fc.as_ref().map(|ids| self.fc_refs(ids)),
            cls_w: self.params.value(self.out_cls.w),
            cls_b: self.params.value(self.out_cls.b),
            reg_w: self.params.value(self.out_reg.w),
            reg_b: self.params.value(self.out_reg.b),
        }
    }

    pub fn head_forward(
        &self,
        face_blob: &Tensor,
        body_blob: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor, HeadCache)> {
        head::head_forward(face_blob, body_blob, &self.head_params())
    }

    /// Backward through the fully connected head; returns blob gradients
    /// (face, body).
    pub fn head_backward(
        &mut self,
        cache: &HeadCache,
        face_blob_shape: &[usize],
        body_blob_shape: Option<&[usize]>,
        grad_cls: &Tensor,
        grad_reg: &Tensor,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let grads: HeadGrads = {
            let params = self.head_params();
            head::head_backward(
                cache,
                &params,
                face_blob_shape,
                body_blob_shape,
                grad_cls,
                grad_reg,
            )?
        };
        let face_fc = self.face_fc.clone();
        apply_fc_grads(&mut self.params, &face_fc, &grads.face);
        if let (Some(ids), Some(g)) = (self.body_fc.clone(), grads.body.as_ref()) {
            apply_fc_grads(&mut self.params, &ids, g);
        }
        self.params.add_grad(self.out_cls.w, &grads.cls_w);
        self.params.add_grad(self.out_cls.b, &grads.cls_b);
        self.params.add_grad(self.out_reg.w, &grads.reg_w);
        self.params.add_grad(self.out_reg.b, &grads.reg_b);
        Ok((grads.face.blob, grads.body.map(|b| b.blob)))
    }

    /// Full inference on one image: propose, refine through the context
    /// head, score-filter, and suppress. Returns (box, score) pairs sorted
    /// by descending score.
    pub fn detect_image(&self, img: &GrayImage) -> Result<Vec<(Bbox, f32)>> {
        let image = image_to_tensor(img);
        let (img_h, img_w) = (img.height as f32, img.width as f32);
        let (sources, _) = self.backbone_forward(&image)?;
        let (fused, _) = self.rpn_fuse_forward(&sources)?;
        let (logits, deltas, _) = self.rpn_head_forward(&fused)?;
        let anchors = self.make_anchors(fused.height(), fused.width());
        let proposals = proposal::propose(
            &logits,
            &deltas,
            &anchors,
            img_w,
            img_h,
            &self.proposal_config(),
        );
        if proposals.is_empty() {
            return Ok(Vec::new());
        }

        let face_boxes: Vec<Bbox> = proposals.iter().map(|p| p.bbox).collect();
        let (face_blob, _) = self.roi_blob_forward(&sources, &face_boxes, RegionKind::Face)?;
        let (cls, reg, _) = if self.cfg.context_enabled {
            let body_boxes: Vec<Bbox> = face_boxes
                .iter()
                .map(|f| context_box(f, &self.cfg.spatial_relation, img_w, img_h))
                .collect();
            let (body_blob, _) = self.roi_blob_forward(&sources, &body_boxes, RegionKind::Body)?;
            self.head_forward(&face_blob, Some(&body_blob))?
        } else {
            self.head_forward(&face_blob, None)?
        };

        let mut scored: Vec<(Bbox, f32)> = Vec::new();
        for (i, p) in proposals.iter().enumerate() {
            let l0 = cls.data()[i * 2] as f64;
            let l1 = cls.data()[i * 2 + 1] as f64;
            let m = l0.max(l1);
            let prob = ((l1 - m).exp() / ((l0 - m).exp() + (l1 - m).exp())) as f32;
            if prob < self.cfg.detect_score_floor {
                continue;
            }
            let t = [
                reg.data()[i * 4],
                reg.data()[i * 4 + 1],
                reg.data()[i * 4 + 2],
                reg.data()[i * 4 + 3],
            ];
            let refined = decode_deltas(&p.bbox, t).clip(img_w, img_h, 1.0);
            if refined.is_valid() {
                scored.push((refined, prob));
            }
        }
        let kept = proposal::nms(&scored, self.cfg.detect_nms_threshold);
        Ok(kept.into_iter().map(|i| scored[i]).collect())
    }

    /// Deterministic restatement of the proposal stage for training.
    pub fn propose_from_outputs(
        &self,
        logits: &Tensor,
        deltas: &Tensor,
        anchors: &[Anchor],
        img_w: f32,
        img_h: f32,
    ) -> Vec<Proposal> {
        proposal::propose(logits, deltas, anchors, img_w, img_h, &self.proposal_config())
    }
}

fn apply_fc_grads(params: &mut Params, ids: &FcIds, grads: &head::PipelineFcGrads) {
    params.add_grad(ids.fc1.w, &grads.fc1_w);
    params.add_grad(ids.fc1.b, &grads.fc1_b);
    params.add_grad(ids.fc2.w, &grads.fc2_w);
    params.add_grad(ids.fc2.b, &grads.fc2_b);
}

fn register_conv(
    params: &mut Params,
    name: &str,
    out_ch: usize,
    in_ch: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> ConvIds {
    let fan_in = in_ch * k * k;
    let fan_out = out_ch * k * k;
    let w = params.register(
        format!("{name}.w"),
        xavier_uniform(&[out_ch, in_ch, k, k], fan_in, fan_out, rng),
    );
    let b = params.register(format!("{name}.b"), Tensor::zeros(&[out_ch]));
    ConvIds { w, b }
}

fn register_fc(
    params: &mut Params,
    name: &str,
    out_dim: usize,
    in_dim: usize,
    rng: &mut ChaCha8Rng,
) -> ConvIds {
    let w = params.register(
        format!("{name}.w"),
        xavier_uniform(&[out_dim, in_dim], in_dim, out_dim, rng),
    );
    let b = params.register(format!("{name}.b"), Tensor::zeros(&[out_dim]));
    ConvIds { w, b }
}

fn register_fc_pipeline(
    params: &mut Params,
    name: &str,
    in_dim: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> FcIds {
    FcIds {
        fc1: register_fc(params, &format!("{name}.fc1"), dim, in_dim, rng),
        fc2: register_fc(params, &format!("{name}.fc2"), dim, dim, rng),
    }
}

fn register_fusion(
    params: &mut Params,
    name: &str,
    source_widths: &[usize; 3],
    scales: &[f32; 3],
    concat_ch: usize,
    reducer_ch: usize,
    rng: &mut ChaCha8Rng,
) -> FusionIds {
    let gammas = [
        params.register(
            format!("{name}.gamma0"),
            fusion::init_scale(source_widths[0], scales[0]),
        ),
        params.register(
            format!("{name}.gamma1"),
            fusion::init_scale(source_widths[1], scales[1]),
        ),
        params.register(
            format!("{name}.gamma2"),
            fusion::init_scale(source_widths[2], scales[2]),
        ),
    ];
    let reducer = register_conv(params, &format!("{name}.reduce"), reducer_ch, concat_ch, 1, rng);
    FusionIds { gammas, reducer }
}
