//! Run configuration: a flat `key = value` text format with dotted section
//! prefixes, strict validation, canonical dumping, and a stable hash over
//! the model-defining sections that guards checkpoint compatibility.

use crate::context::SpatialRelation;
use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    /// Output channels of each conv set.
    pub widths: Vec<usize>,
    /// 3x3 convolutions per set.
    pub repeats: Vec<usize>,
    /// Whether the first set starts with a 2x2 downsampling pool (the
    /// remaining sets always do).
    pub pool_first: bool,
}

impl BackboneConfig {
    /// Cumulative stride of each set's output map.
    pub fn strides(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.widths.len());
        let mut s = 1usize;
        for i in 0..self.widths.len() {
            if i > 0 || self.pool_first {
                s *= 2;
            }
            out.push(s);
        }
        out
    }

    /// Indices of the three source maps feeding fusion (the last three sets).
    pub fn source_sets(&self) -> [usize; 3] {
        let n = self.widths.len();
        [n - 3, n - 2, n - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleMode {
    /// Use the configured constants directly.
    Fixed,
    /// Rescale the constants from a warm-up activation measurement,
    /// preserving their sqrt(channels) profile.
    Warmup,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub image_size: usize,

    pub backbone: BackboneConfig,

    pub fusion_rpn_scales: [f32; 3],
    pub fusion_roi_scales: [f32; 3],
    pub fusion_scale_mode: ScaleMode,
    pub fusion_reducer_channels: usize,

    pub anchor_scales: Vec<f32>,
    pub anchor_ratios: Vec<f32>,

    pub rpn_nms_threshold: f32,
    pub rpn_pre_nms_topk: usize,
    pub rpn_post_nms_topk: usize,
    pub rpn_min_size: f32,
    pub rpn_pos_iou: f32,
    pub rpn_neg_iou: f32,
    pub rpn_batch: usize,
    pub rpn_pos_fraction: f32,

    pub context_enabled: bool,
    pub spatial_relation: SpatialRelation,

    pub roi_pool_size: usize,
    pub head_fc_dim: usize,
    pub head_fusion: String,
    pub head_pos_iou: f32,
    pub head_neg_iou: f32,
    pub head_regions: usize,
    pub head_pos_fraction: f32,

    pub loss_lambda: f32,

    pub optim_lr: f32,
    pub optim_momentum: f32,
    pub optim_weight_decay: f32,
    pub optim_iterations: usize,
    /// Multiplier applied to the learning rate for the tail of training.
    pub optim_lr_decay: f32,
    /// Fraction of the iteration budget after which the decay kicks in.
    pub optim_lr_decay_at: f32,

    pub detect_nms_threshold: f32,
    pub detect_score_floor: f32,

    pub synth_train_images: usize,
    pub synth_val_images: usize,
    pub synth_faces_min: usize,
    pub synth_faces_max: usize,
    pub synth_face_min_size: f32,
    pub synth_face_max_size: f32,
    pub synth_occlusion: f32,
    pub synth_distractors_max: usize,

    pub checkpoint_allow_mismatch: bool,
}

impl Default for Config {
    /// Desk-scale defaults: a 3-set backbone trainable on one CPU core in
    /// minutes, with anchor sizes matched to the synthetic face range.
    fn default() -> Self {
        Config {
            seed: 7,
            image_size: 64,
            backbone: BackboneConfig {
                widths: vec![16, 32, 32],
                repeats: vec![1, 1, 1],
                pool_first: true,
            },
            fusion_rpn_scales: [66.84, 94.52, 94.52],
            fusion_roi_scales: [57.75, 81.67, 81.67],
            fusion_scale_mode: ScaleMode::Warmup,
            fusion_reducer_channels: 32,
            anchor_scales: vec![0.75, 1.5, 3.0, 4.5],
            anchor_ratios: vec![1.0],
            rpn_nms_threshold: 0.7,
            rpn_pre_nms_topk: 2000,
            rpn_post_nms_topk: 300,
            rpn_min_size: 2.0,
            rpn_pos_iou: 0.5,
            rpn_neg_iou: 0.3,
            rpn_batch: 64,
            rpn_pos_fraction: 0.5,
            context_enabled: true,
            spatial_relation: SpatialRelation::default(),
            roi_pool_size: 7,
            head_fc_dim: 64,
            head_fusion: "late".to_string(),
            head_pos_iou: 0.5,
            head_neg_iou: 0.3,
            head_regions: 128,
            head_pos_fraction: 0.25,
            loss_lambda: 1.0,
            optim_lr: 0.02,
            optim_momentum: 0.9,
            optim_weight_decay: 5e-4,
            optim_iterations: 2400,
            optim_lr_decay: 0.1,
            optim_lr_decay_at: 0.8,
            detect_nms_threshold: 0.3,
            detect_score_floor: 0.5,
            synth_train_images: 600,
            synth_val_images: 200,
            synth_faces_min: 1,
            synth_faces_max: 2,
            synth_face_min_size: 6.0,
            synth_face_max_size: 28.0,
            synth_occlusion: 0.0,
            synth_distractors_max: 2,
            checkpoint_allow_mismatch: false,
        }
    }
}

impl Config {
    /// The full-size layout: VGG-16 conv sets with the published fusion
    /// scale initializations taken as-is (no warm-up rescaling).
    pub fn vgg16_layout() -> Self {
        Config {
            image_size: 224,
            backbone: BackboneConfig {
                widths: vec![64, 128, 256, 512, 512],
                repeats: vec![2, 2, 3, 3, 3],
                pool_first: false,
            },
            fusion_scale_mode: ScaleMode::Fixed,
            fusion_reducer_channels: 512,
            anchor_scales: vec![2.0, 4.0, 8.0, 16.0, 32.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            head_fc_dim: 1024,
            ..Config::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::ParseLine {
                path: path.to_path_buf(),
                line: lineno + 1,
                detail: format!("expected key=value, got '{line}'"),
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| Error::ParseLine {
                path: path.to_path_buf(),
                line: lineno + 1,
                detail: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("invalid value '{value}' for {what}"));
        match key {
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "image.size" => self.image_size = value.parse().map_err(|_| bad(key))?,
            "backbone.widths" => self.backbone.widths = parse_list(value).ok_or_else(|| bad(key))?,
            "backbone.repeats" => {
                self.backbone.repeats = parse_list(value).ok_or_else(|| bad(key))?
            }
            "backbone.pool_first" => {
                self.backbone.pool_first = parse_bool(value).ok_or_else(|| bad(key))?
            }
            "fusion.rpn_scales" => {
                self.fusion_rpn_scales = parse_triple(value).ok_or_else(|| bad(key))?
            }
            "fusion.roi_scales" => {
                self.fusion_roi_scales = parse_triple(value).ok_or_else(|| bad(key))?
            }
            "fusion.scale_mode" => {
                self.fusion_scale_mode = match value {
                    "fixed" => ScaleMode::Fixed,
                    "warmup" => ScaleMode::Warmup,
                    _ => return Err(bad(key)),
                }
            }
            "fusion.reducer_channels" => {
                self.fusion_reducer_channels = value.parse().map_err(|_| bad(key))?
            }
            "anchors.scales" => self.anchor_scales = parse_list(value).ok_or_else(|| bad(key))?,
            "anchors.ratios" => self.anchor_ratios = parse_list(value).ok_or_else(|| bad(key))?,
            "rpn.nms_threshold" => self.rpn_nms_threshold = value.parse().map_err(|_| bad(key))?,
            "rpn.pre_nms_topk" => self.rpn_pre_nms_topk = value.parse().map_err(|_| bad(key))?,
            "rpn.post_nms_topk" => self.rpn_post_nms_topk = value.parse().map_err(|_| bad(key))?,
            "rpn.min_size" => self.rpn_min_size = value.parse().map_err(|_| bad(key))?,
            "rpn.pos_iou" => self.rpn_pos_iou = value.parse().map_err(|_| bad(key))?,
            "rpn.neg_iou" => self.rpn_neg_iou = value.parse().map_err(|_| bad(key))?,
            "rpn.batch" => self.rpn_batch = value.parse().map_err(|_| bad(key))?,
            "rpn.pos_fraction" => self.rpn_pos_fraction = value.parse().map_err(|_| bad(key))?,
            "context.enabled" => {
                self.context_enabled = parse_bool(value).ok_or_else(|| bad(key))?
            }
            "context.tx" => self.spatial_relation.tx = value.parse().map_err(|_| bad(key))?,
            "context.ty" => self.spatial_relation.ty = value.parse().map_err(|_| bad(key))?,
            "context.tw" => self.spatial_relation.tw = value.parse().map_err(|_| bad(key))?,
            "context.th" => self.spatial_relation.th = value.parse().map_err(|_| bad(key))?,
            "roi.pool_size" => self.roi_pool_size = value.parse().map_err(|_| bad(key))?,
            "head.fc_dim" => self.head_fc_dim = value.parse().map_err(|_| bad(key))?,
            "head.fusion" => self.head_fusion = value.to_string(),
            "head.pos_iou" => self.head_pos_iou = value.parse().map_err(|_| bad(key))?,
            "head.neg_iou" => self.head_neg_iou = value.parse().map_err(|_| bad(key))?,
            "head.regions" => self.head_regions = value.parse().map_err(|_| bad(key))?,
            "head.pos_fraction" => self.head_pos_fraction = value.parse().map_err(|_| bad(key))?,
            "loss.lambda" => self.loss_lambda = value.parse().map_err(|_| bad(key))?,
            "optim.lr" => self.optim_lr = value.parse().map_err(|_| bad(key))?,
            "optim.momentum" => self.optim_momentum = value.parse().map_err(|_| bad(key))?,
            "optim.weight_decay" => {
                self.optim_weight_decay = value.parse().map_err(|_| bad(key))?
            }
            "optim.iterations" => self.optim_iterations = value.parse().map_err(|_| bad(key))?,
            "optim.lr_decay" => self.optim_lr_decay = value.parse().map_err(|_| bad(key))?,
            "optim.lr_decay_at" => self.optim_lr_decay_at = value.parse().map_err(|_| bad(key))?,
            "detect.nms_threshold" => {
                self.detect_nms_threshold = value.parse().map_err(|_| bad(key))?
            }
            "detect.score_floor" => {
                self.detect_score_floor = value.parse().map_err(|_| bad(key))?
            }
            "synth.train_images" => {
                self.synth_train_images = value.parse().map_err(|_| bad(key))?
            }
            "synth.val_images" => self.synth_val_images = value.parse().map_err(|_| bad(key))?,
            "synth.faces_min" => self.synth_faces_min = value.parse().map_err(|_| bad(key))?,
            "synth.faces_max" => self.synth_faces_max = value.parse().map_err(|_| bad(key))?,
            "synth.face_min_size" => {
                self.synth_face_min_size = value.parse().map_err(|_| bad(key))?
            }
            "synth.face_max_size" => {
                self.synth_face_max_size = value.parse().map_err(|_| bad(key))?
            }
            "synth.occlusion" => self.synth_occlusion = value.parse().map_err(|_| bad(key))?,
            "synth.distractors_max" => {
                self.synth_distractors_max = value.parse().map_err(|_| bad(key))?
            }

            "checkpoint.allow_mismatch" => {
                self.checkpoint_allow_mismatch = parse_bool(value).ok_or_else(|| bad(key))?
            }
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let b = &self.backbone;
        if b.widths.is_empty() || b.widths.len() != b.repeats.len() {
            return fail(format!(
                "backbone.widths ({}) and backbone.repeats ({}) must be equal-length and non-empty",
                b.widths.len(),
                b.repeats.len()
            ));
        }
        if b.widths.len() < 3 {
            return fail("backbone needs at least 3 conv sets to source fusion".into());
        }
        if b.widths.iter().any(|&w| w == 0) || b.repeats.iter().any(|&r| r == 0) {
            return fail("backbone widths and repeats must be positive".into());
        }
        if self.anchor_scales.is_empty() || self.anchor_ratios.is_empty() {
            return fail("anchor scales and ratios must be non-empty".into());
        }
        if self.anchor_scales.iter().any(|&s| s <= 0.0)
            || self.anchor_ratios.iter().any(|&r| r <= 0.0)
        {
            return fail("anchor scales and ratios must be positive".into());
        }
        for (name, v) in [
            ("rpn.nms_threshold", self.rpn_nms_threshold),
            ("detect.nms_threshold", self.detect_nms_threshold),
        ] {
            if !(0.0 < v && v < 1.0) {
                return fail(format!("{name} must be in (0,1), got {v}"));
            }
        }
        if self.rpn_pos_iou <= self.rpn_neg_iou {
            return fail("rpn.pos_iou must exceed rpn.neg_iou".into());
        }
        if self.head_pos_iou <= self.head_neg_iou {
            return fail("head.pos_iou must exceed head.neg_iou".into());
        }
        if self.head_fusion != "late" {
            return fail(format!(
                "head.fusion '{}' is not supported; only 'late' fusion is implemented",
                self.head_fusion
            ));
        }
        if self.fusion_rpn_scales.iter().any(|&s| s <= 0.0)
            || self.fusion_roi_scales.iter().any(|&s| s <= 0.0)
        {
            return fail("fusion scale initializations must be strictly positive".into());
        }
        if self.roi_pool_size == 0 || self.head_fc_dim == 0 || self.fusion_reducer_channels == 0 {
            return fail("roi.pool_size, head.fc_dim, fusion.reducer_channels must be positive".into());
        }
        if self.loss_lambda < 0.0 {
            return fail("loss.lambda must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.optim_momentum) {
            return fail("optim.momentum must be in [0,1)".into());
        }
        if self.optim_lr < 0.0 || self.optim_weight_decay < 0.0 {
            return fail("optim.lr and optim.weight_decay must be >= 0".into());
        }
        if !(0.0 < self.optim_lr_decay && self.optim_lr_decay <= 1.0) {
            return fail("optim.lr_decay must be in (0,1]".into());
        }
        if !(0.0..=1.0).contains(&self.optim_lr_decay_at) {
            return fail("optim.lr_decay_at must be in [0,1]".into());
        }
        if self.synth_faces_min == 0 || self.synth_faces_max < self.synth_faces_min {
            return fail("synth.faces_min must be >= 1 and <= synth.faces_max".into());
        }
        if !(0.0..=1.0).contains(&self.synth_occlusion) {
            return fail("synth.occlusion must be in [0,1]".into());
        }

        if self.synth_face_min_size <= 0.0 || self.synth_face_max_size < self.synth_face_min_size {
            return fail("synth face size range is empty or non-positive".into());
        }
        if !(0.0..=1.0).contains(&self.rpn_pos_fraction)
            || !(0.0..=1.0).contains(&self.head_pos_fraction)
        {
            return fail("positive-sample fractions must be in [0,1]".into());
        }
        if self.image_size < 8 {
            return fail("image.size must be at least 8".into());
        }
        Ok(())
    }

    /// Canonical text form; parsing the dump reproduces the config.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let kv = |s: &mut String, k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv(&mut s, "seed", self.seed.to_string());
        kv(&mut s, "image.size", self.image_size.to_string());
        kv(&mut s, "backbone.widths", join(&self.backbone.widths));
        kv(&mut s, "backbone.repeats", join(&self.backbone.repeats));
        kv(
            &mut s,
            "backbone.pool_first",
            self.backbone.pool_first.to_string(),
        );
        kv(&mut s, "fusion.rpn_scales", join(&self.fusion_rpn_scales));
        kv(&mut s, "fusion.roi_scales", join(&self.fusion_roi_scales));
        kv(
            &mut s,
            "fusion.scale_mode",
            match self.fusion_scale_mode {
                ScaleMode::Fixed => "fixed".into(),
                ScaleMode::Warmup => "warmup".into(),
            },
        );
        kv(
            &mut s,
            "fusion.reducer_channels",
            self.fusion_reducer_channels.to_string(),
        );
        kv(&mut s, "anchors.scales", join(&self.anchor_scales));
        kv(&mut s, "anchors.ratios", join(&self.anchor_ratios));
        kv(&mut s, "rpn.nms_threshold", self.rpn_nms_threshold.to_string());
        kv(&mut s, "rpn.pre_nms_topk", self.rpn_pre_nms_topk.to_string());
        kv(&mut s, "rpn.post_nms_topk", self.rpn_post_nms_topk.to_string());
        kv(&mut s, "rpn.min_size", self.rpn_min_size.to_string());
        kv(&mut s, "rpn.pos_iou", self.rpn_pos_iou.to_string());
        kv(&mut s, "rpn.neg_iou", self.rpn_neg_iou.to_string());
        kv(&mut s, "rpn.batch", self.rpn_batch.to_string());
        kv(&mut s, "rpn.pos_fraction", self.rpn_pos_fraction.to_string());
        kv(&mut s, "context.enabled", self.context_enabled.to_string());
        kv(&mut s, "context.tx", self.spatial_relation.tx.to_string());
        kv(&mut s, "context.ty", self.spatial_relation.ty.to_string());
        kv(&mut s, "context.tw", self.spatial_relation.tw.to_string());
        kv(&mut s, "context.th", self.spatial_relation.th.to_string());
        kv(&mut s, "roi.pool_size", self.roi_pool_size.to_string());
        kv(&mut s, "head.fc_dim", self.head_fc_dim.to_string());
        kv(&mut s, "head.fusion", self.head_fusion.clone());
        kv(&mut s, "head.pos_iou", self.head_pos_iou.to_string());
        kv(&mut s, "head.neg_iou", self.head_neg_iou.to_string());
        kv(&mut s, "head.regions", self.head_regions.to_string());
        kv(&mut s, "head.pos_fraction", self.head_pos_fraction.to_string());
        kv(&mut s, "loss.lambda", self.loss_lambda.to_string());
        kv(&mut s, "optim.lr", self.optim_lr.to_string());
        kv(&mut s, "optim.momentum", self.optim_momentum.to_string());
        kv(&mut s, "optim.weight_decay", self.optim_weight_decay.to_string());
        kv(&mut s, "optim.iterations", self.optim_iterations.to_string());
        kv(&mut s, "optim.lr_decay", self.optim_lr_decay.to_string());
        kv(&mut s, "optim.lr_decay_at", self.optim_lr_decay_at.to_string());
        kv(
            &mut s,
            "detect.nms_threshold",
            self.detect_nms_threshold.to_string(),
        );
        kv(&mut s, "detect.score_floor", self.detect_score_floor.to_string());
        kv(&mut s, "synth.train_images", self.synth_train_images.to_string());
        kv(&mut s, "synth.val_images", self.synth_val_images.to_string());
        kv(&mut s, "synth.faces_min", self.synth_faces_min.to_string());
        kv(&mut s, "synth.faces_max", self.synth_faces_max.to_string());
        kv(
            &mut s,
            "synth.face_min_size",
            self.synth_face_min_size.to_string(),
        );
        kv(
            &mut s,
            "synth.face_max_size",
            self.synth_face_max_size.to_string(),
        );
        kv(&mut s, "synth.occlusion", self.synth_occlusion.to_string());
        kv(
            &mut s,
            "synth.distractors_max",
            self.synth_distractors_max.to_string(),
        );

        kv(
            &mut s,
            "checkpoint.allow_mismatch",
            self.checkpoint_allow_mismatch.to_string(),
        );
        s
    }

    /// FNV-1a over the model-defining sections of the dump (backbone,
    /// fusion, anchors, context, roi, head): configs that agree here produce
    /// interchangeable checkpoints.
    pub fn model_hash(&self) -> u64 {
        let mut hash: u64 = 0xcbf29ce484222325;
        for line in self.dump().lines() {
            let model_line = ["backbone.", "fusion.", "anchors.", "context.", "roi.", "head."]
                .iter()
                .any(|p| line.starts_with(p));
            if !model_line {
                continue;
            }
            for byte in line.as_bytes() {
                hash ^= *byte as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
            hash ^= b'\n' as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        hash
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" => Some(true),
        "false" | "0" => Some(false),
        _ => None,
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Option<Vec<T>> {
    let items: Option<Vec<T>> = v
        .split(',')
        .map(|p| p.trim().parse::<T>().ok())
        .collect();
    items.filter(|list| !list.is_empty())
}

fn parse_triple(v: &str) -> Option<[f32; 3]> {
    let list: Vec<f32> = parse_list(v)?;
    if list.len() != 3 {
        return None;
    }
    Some([list[0], list[1], list[2]])
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        Config::default().validate().unwrap();
        Config::vgg16_layout().validate().unwrap();
    }

    #[test]
    fn dump_round_trips_through_parser() {
        let cfg = Config::vgg16_layout();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.conf");
        std::fs::write(&path, cfg.dump()).unwrap();
        let loaded = Config::load(&path).unwrap();
        assert_eq!(loaded, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = Config::default();
        let err = cfg.set("rpn.warp_factor", "3").unwrap_err();
        assert!(err.to_string().contains("unknown key"));
    }

    #[test]
    fn malformed_lines_name_the_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.conf");
        std::fs::write(&path, "seed = 1\nnot a pair\n").unwrap();
        let err = Config::load(&path).unwrap_err().to_string();
        assert!(err.contains(":2:"), "error must carry line number: {err}");
    }

    #[test]
    fn early_fusion_is_rejected() {
        let mut cfg = Config::default();
        cfg.set("head.fusion", "early").unwrap();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("late"), "unexpected message: {err}");
    }

    #[test]
    fn vgg_dump_carries_published_scale_constants() {
        let dump = Config::vgg16_layout().dump();
        assert!(dump.contains("fusion.rpn_scales = 66.84,94.52,94.52"));
        assert!(dump.contains("fusion.roi_scales = 57.75,81.67,81.67"));
    }

    #[test]
    fn model_hash_tracks_model_sections_only() {
        let base = Config::default();
        let mut operational = base.clone();
        operational.set("optim.lr", "0.5").unwrap();
        operational.set("seed", "99").unwrap();
        operational.set("detect.score_floor", "0.9").unwrap();
        assert_eq!(base.model_hash(), operational.model_hash());

        let mut ablated = base.clone();
        ablated.set("context.enabled", "false").unwrap();
        assert_ne!(base.model_hash(), ablated.model_hash());

        let mut reshaped = base.clone();
        reshaped.set("backbone.widths", "8,16,16").unwrap();
        assert_ne!(base.model_hash(), reshaped.model_hash());
    }

    #[test]
    fn strides_follow_pooling_layout() {
        let desk = Config::default().backbone;
        assert_eq!(desk.strides(), vec![2, 4, 8]);
        let vgg = Config::vgg16_layout().backbone;
        assert_eq!(vgg.strides(), vec![1, 2, 4, 8, 16]);
        assert_eq!(vgg.source_sets(), [2, 3, 4]);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.conf");
        std::fs::write(&path, "# header\n\nseed = 42 # trailing\n").unwrap();
        let cfg = Config::load(&path).unwrap();
        assert_eq!(cfg.seed, 42);
    }
}
