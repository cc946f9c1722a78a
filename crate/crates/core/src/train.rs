//! Single-threaded, deterministic training: one image per iteration, joint
//! proposal + detection losses, with gradients cut at proposal box
//! coordinates (approximate joint training).

use crate::boxes::Bbox;
use crate::checkpoint;
use crate::config::Config;
use crate::context::{assign_targets, context_box, detection_loss, AssignResult, RegionKind};
use crate::dataset::{annotations_by_image, read_annotations};
use crate::error::{Error, Result};
use crate::loss::{smooth_l1, softmax_cross_entropy, IGNORE_LABEL};
use crate::model::{image_to_tensor, Model};
use crate::optim::Sgd;
use crate::pgm::{read_pgm, GrayImage};
use crate::proposal::Anchor;
use crate::synth::derive_rng;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// One image with its face ground truth.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub name: String,
    pub image: GrayImage,
    pub faces: Vec<Bbox>,
}

/// Loads a split directory (images plus faces.txt) fully into memory.
pub fn load_split(dir: &Path) -> Result<Vec<TrainSample>> {
    let annotations = read_annotations(&dir.join("faces.txt"))?;
    let by_image = annotations_by_image(&annotations);
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(format!("reading {}", dir.display()), e))?
        .filter_map(|entry| entry.ok())
        .map(|entry| entry.file_name().to_string_lossy().into_owned())
        .filter(|name| name.ends_with(".pgm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::invalid(
            "load_split",
            format!("no .pgm images in {}", dir.display()),
        ));
    }
    names
        .into_iter()
        .map(|name| {
            let image = read_pgm(&dir.join(&name))?;
            let faces = by_image.get(&name).cloned().unwrap_or_default();
            Ok(TrainSample { name, image, faces })
        })
        .collect()
}

/// Per-iteration loss terms, logged as
/// `iter,loss_rpn_cls,loss_rpn_reg,loss_det_cls,loss_det_reg`.
#[derive(Debug, Clone, Copy)]
pub struct IterLog {
    pub iter: usize,
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub det_cls: f64,
    pub det_reg: f64,
}

impl IterLog {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            self.iter, self.rpn_cls, self.rpn_reg, self.det_cls, self.det_reg
        )
    }

    pub fn total(&self) -> f64 {
        self.rpn_cls + self.rpn_reg + self.det_cls + self.det_reg
    }
}

/// Keeps up to `batch` candidates, at most `pos_fraction * batch` of them
/// positive; everything unsampled is relabeled as ignored.
fn sample_batch(
    labels: &mut [i32],
    batch: usize,
    pos_fraction: f32,
    rng: &mut ChaCha8Rng,
) -> (usize, usize) {
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        match l {
            1 => pos.push(i),
            0 => neg.push(i),
            _ => {}
        }
    }
    pos.shuffle(rng);
    neg.shuffle(rng);
    let pos_cap = ((batch as f32 * pos_fraction).round() as usize).min(pos.len());
    let neg_cap = (batch - pos_cap).min(neg.len());
    for &i in &pos[pos_cap..] {
        labels[i] = IGNORE_LABEL;
    }
    for &i in &neg[neg_cap..] {
        labels[i] = IGNORE_LABEL;
    }
    (pos_cap, neg_cap)
}

/// Gathers the (background, face) logit pair and delta quadruple of each
/// anchor into row tensors.
fn gather_rpn_rows(logits: &Tensor, deltas: &Tensor, anchors: &[Anchor]) -> (Tensor, Tensor) {
    let n = anchors.len();
    let mut cls = Tensor::zeros(&[n, 2]);
    let mut reg = Tensor::zeros(&[n, 4]);
    for (i, a) in anchors.iter().enumerate() {
        cls.data_mut()[i * 2] = logits.at4(0, 2 * a.cell_slot, a.row, a.col);
        cls.data_mut()[i * 2 + 1] = logits.at4(0, 2 * a.cell_slot + 1, a.row, a.col);
        for k in 0..4 {
            reg.data_mut()[i * 4 + k] = deltas.at4(0, 4 * a.cell_slot + k, a.row, a.col);
        }
    }
    (cls, reg)
}

fn scatter_rpn_grads(
    grad_cls_rows: &Tensor,
    grad_reg_rows: &Tensor,
    anchors: &[Anchor],
    logits_shape: &[usize],
    deltas_shape: &[usize],
) -> (Tensor, Tensor) {
    let mut gl = Tensor::zeros(logits_shape);
    let mut gd = Tensor::zeros(deltas_shape);
    for (i, a) in anchors.iter().enumerate() {
        let li0 = gl.idx4(0, 2 * a.cell_slot, a.row, a.col);
        let li1 = gl.idx4(0, 2 * a.cell_slot + 1, a.row, a.col);
        gl.data_mut()[li0] += grad_cls_rows.data()[i * 2];
        gl.data_mut()[li1] += grad_cls_rows.data()[i * 2 + 1];
        for k in 0..4 {
            let di = gd.idx4(0, 4 * a.cell_slot + k, a.row, a.col);
            gd.data_mut()[di] += grad_reg_rows.data()[i * 4 + k];
        }
    }
    (gl, gd)
}

fn add_assign(acc: &mut Tensor, delta: &Tensor) {
    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
        *a += d;
    }
}

/// Runs one SGD iteration on one image; returns the loss terms.
fn train_step(
    model: &mut Model,
    sgd: &mut Sgd,
    sample: &TrainSample,
    iter: usize,
) -> Result<IterLog> {
    let cfg = model.cfg.clone();
    let mut rng = derive_rng(cfg.seed, "train-iter", iter as u64);
    let image = image_to_tensor(&sample.image);
    let (img_h, img_w) = (sample.image.height as f32, sample.image.width as f32);
    let gts = &sample.faces;

    let (sources, bb_cache) = model.backbone_forward(&image)?;
    let source_shapes: Vec<Vec<usize>> =
        sources.iter().map(|s| s.tensor.shape().to_vec()).collect();
    let (fused, fuse_cache) = model.rpn_fuse_forward(&sources)?;
    let (logits, deltas, rpn_cache) = model.rpn_head_forward(&fused)?;

    // Proposal-path targets over all anchors.
    let anchors = model.make_anchors(fused.height(), fused.width());
    let anchor_boxes: Vec<Bbox> = anchors.iter().map(|a| a.bbox).collect();
    let mut rpn_assign = assign_targets(&anchor_boxes, gts, cfg.rpn_pos_iou, cfg.rpn_neg_iou);
    sample_batch(
        &mut rpn_assign.labels,
        cfg.rpn_batch,
        cfg.rpn_pos_fraction,
        &mut rng,
    );
    let (cls_rows, reg_rows) = gather_rpn_rows(&logits, &deltas, &anchors);
    let (rpn_cls_loss, grad_cls_rows) = softmax_cross_entropy(&cls_rows, &rpn_assign.labels)?;

    let n_anchors = anchors.len();
    let mut reg_targets = Tensor::zeros(&[n_anchors, 4]);
    let mut reg_weights = Tensor::zeros(&[n_anchors, 4]);
    for i in 0..n_anchors {
        if rpn_assign.labels[i] == 1 {
            for k in 0..4 {
                reg_targets.data_mut()[i * 4 + k] = rpn_assign.deltas[i][k];
                reg_weights.data_mut()[i * 4 + k] = 1.0;
            }
        }
    }
    let (rpn_reg_loss, mut grad_reg_rows) = smooth_l1(&reg_rows, &reg_targets, &reg_weights)?;
    grad_reg_rows
        .data_mut()
        .iter_mut()
        .for_each(|g| *g *= cfg.loss_lambda);

    let (grad_logits, grad_deltas) = scatter_rpn_grads(
        &grad_cls_rows,
        &grad_reg_rows,
        &anchors,
        logits.shape(),
        deltas.shape(),
    );

    // Detection-path candidates: proposals (coordinates detached) plus the
    // ground-truth boxes, which keep the head supplied with positives while
    // the proposal network is still warming up.
    let proposals = model.propose_from_outputs(&logits, &deltas, &anchors, img_w, img_h);
    let mut candidates: Vec<Bbox> = proposals.iter().map(|p| p.bbox).collect();
    candidates.extend(gts.iter().copied());

    let (det_cls_loss, det_reg_loss, det_grads) = if candidates.is_empty() {
        (0.0, 0.0, None)
    } else {
        let mut det_assign =
            assign_targets(&candidates, gts, cfg.head_pos_iou, cfg.head_neg_iou);
        sample_batch(
            &mut det_assign.labels,
            cfg.head_regions,
            cfg.head_pos_fraction,
            &mut rng,
        );
        let selected: Vec<usize> = (0..candidates.len())
            .filter(|&i| det_assign.labels[i] != IGNORE_LABEL)
            .collect();
        if selected.is_empty() {
            (0.0, 0.0, None)
        } else {
            let face_boxes: Vec<Bbox> = selected.iter().map(|&i| candidates[i]).collect();
            let sel_assign = AssignResult {
                labels: selected.iter().map(|&i| det_assign.labels[i]).collect(),
                deltas: selected.iter().map(|&i| det_assign.deltas[i]).collect(),
                matched_gt: selected.iter().map(|&i| det_assign.matched_gt[i]).collect(),
            };

            let (face_blob, face_cache) =
                model.roi_blob_forward(&sources, &face_boxes, RegionKind::Face)?;
            let body = if cfg.context_enabled {
                let body_boxes: Vec<Bbox> = face_boxes
                    .iter()
                    .map(|f| context_box(f, &cfg.spatial_relation, img_w, img_h))
                    .collect();
                Some(model.roi_blob_forward(&sources, &body_boxes, RegionKind::Body)?)
            } else {
                None
            };
            let body_blob = body.as_ref().map(|(blob, _)| blob);
            let (cls, reg, head_cache) = model.head_forward(&face_blob, body_blob)?;
            let losses = detection_loss(&cls, &reg, &sel_assign, cfg.loss_lambda)?;

            let (grad_face_blob, grad_body_blob) = model.head_backward(
                &head_cache,
                face_blob.shape(),
                body_blob.map(|b| b.shape()),
                &losses.grad_cls,
                &losses.grad_reg,
            )?;
            let face_src_grads = model.roi_blob_backward(
                &face_cache,
                RegionKind::Face,
                &source_shapes,
                &grad_face_blob,
            )?;
            let body_src_grads = match (&body, grad_body_blob) {
                (Some((_, body_cache)), Some(gb)) => Some(model.roi_blob_backward(
                    body_cache,
                    RegionKind::Body,
                    &source_shapes,
                    &gb,
                )?),
                _ => None,
            };
            (
                losses.cls,
                losses.reg,
                Some((face_src_grads, body_src_grads)),
            )
        }
    };

    // Proposal-path backward.
    let grad_fused = model.rpn_head_backward(&rpn_cache, &grad_logits, &grad_deltas)?;
    let mut source_grads = model.rpn_fuse_backward(&fuse_cache, &grad_fused)?;

    if let Some((face_grads, body_grads)) = det_grads {
        for k in 0..3 {
            add_assign(&mut source_grads[k], &face_grads[k]);
            if let Some(bg) = &body_grads {
                add_assign(&mut source_grads[k], &bg[k]);
            }
        }
    }
    model.backbone_backward(&bb_cache, source_grads)?;

    let log = IterLog {
        iter,
        rpn_cls: rpn_cls_loss,
        rpn_reg: rpn_reg_loss,
        det_cls: det_cls_loss,
        det_reg: det_reg_loss,
    };
    if !log.total().is_finite() {
        return Err(Error::NonFinite {
            context: format!("loss at iteration {iter}"),
        });
    }
    sgd.step(&mut model.params)?;
    Ok(log)
}

const CHECKPOINT_EVERY: usize = 200;

/// Trains for `cfg.optim_iterations` iterations over the split, writing the
/// checkpoint to `out` periodically and at the end. On a non-finite loss the
/// run aborts and `out` retains the last good checkpoint.
pub fn train(
    cfg: &Config,
    data_dir: &Path,
    out: &Path,
    mut on_iter: impl FnMut(&IterLog),
) -> Result<Model> {
    let samples = load_split(data_dir)?;
    let warmup = image_to_tensor(&samples[0].image);
    let mut model = Model::new(cfg, Some(&warmup))?;
    let mut sgd = Sgd::new(cfg.optim_lr, cfg.optim_momentum, cfg.optim_weight_decay)?;

    checkpoint::save(&model, out)?;
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    let decay_from = (cfg.optim_iterations as f32 * cfg.optim_lr_decay_at) as usize;
    for iter in 0..cfg.optim_iterations {
        if iter % n == 0 {
            let mut order_rng = derive_rng(cfg.seed, "epoch-order", (iter / n) as u64);
            order.shuffle(&mut order_rng);
        }
        sgd.lr = if iter >= decay_from {
            cfg.optim_lr * cfg.optim_lr_decay
        } else {
            cfg.optim_lr
        };
        let sample = &samples[order[iter % n]];
        let log = train_step(&mut model, &mut sgd, sample, iter)?;
        on_iter(&log);
        if (iter + 1) % CHECKPOINT_EVERY == 0 {
            checkpoint::save(&model, out)?;
        }
    }
    checkpoint::save(&model, out)?;
    Ok(model)
}

/// Convenience for tests: trains on an in-memory sample list.
pub fn train_in_memory(
    cfg: &Config,
    samples: &[TrainSample],
    mut on_iter: impl FnMut(&IterLog),
) -> Result<Model> {
    let warmup = image_to_tensor(&samples[0].image);
    let mut model = Model::new(cfg, Some(&warmup))?;
    let mut sgd = Sgd::new(cfg.optim_lr, cfg.optim_momentum, cfg.optim_weight_decay)?;
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    let decay_from = (cfg.optim_iterations as f32 * cfg.optim_lr_decay_at) as usize;
    for iter in 0..cfg.optim_iterations {
        if iter % n == 0 {
            let mut order_rng = derive_rng(cfg.seed, "epoch-order", (iter / n) as u64);
            order.shuffle(&mut order_rng);
        }
        sgd.lr = if iter >= decay_from {
            cfg.optim_lr * cfg.optim_lr_decay
        } else {
            cfg.optim_lr
        };
        let log = train_step(&mut model, &mut sgd, &samples[order[iter % n]], iter)?;
        on_iter(&log);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{derive_rng as synth_rng, render_scene};

    fn tiny_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.image_size = 32;
        cfg.backbone.widths = vec![4, 8, 8];
        cfg.backbone.repeats = vec![1, 1, 1];
        cfg.fusion_reducer_channels = 8;
        cfg.head_fc_dim = 8;
        cfg.roi_pool_size = 3;
        cfg.anchor_scales = vec![1.0, 2.0];
        cfg.anchor_ratios = vec![1.0];
        cfg.rpn_batch = 16;
        cfg.head_regions = 16;
        cfg.synth_face_min_size = 6.0;
        cfg.synth_face_max_size = 14.0;
        cfg.optim_iterations = 3;
        cfg
    }

    fn make_samples(cfg: &Config, n: usize) -> Vec<TrainSample> {
        (0..n)
            .map(|i| {
                let mut rng = synth_rng(cfg.seed, "train", i as u64);
                let scene = render_scene(cfg, &mut rng);
                TrainSample {
                    name: format!("img_{i:06}.pgm"),
                    image: scene.image,
                    faces: scene.faces,
                }
            })
            .collect()
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut cfg = tiny_cfg();
        cfg.optim_lr = 0.0;
        cfg.optim_weight_decay = 0.0;
        cfg.optim_iterations = 4;
        let samples = make_samples(&cfg, 2);
        let warmup = image_to_tensor(&samples[0].image);
        let reference = Model::new(&cfg, Some(&warmup)).unwrap();
        let trained = train_in_memory(&cfg, &samples, |_| {}).unwrap();
        for (a, b) in reference.params.iter().zip(trained.params.iter()) {
            assert_eq!(a.value.data(), b.value.data(), "{} drifted", a.name);
        }
    }

    #[test]
    fn loss_decreases_on_fixed_micro_batch() {
        let mut cfg = tiny_cfg();
        cfg.optim_iterations = 50;
        cfg.optim_lr = 0.01;
        let samples = make_samples(&cfg, 1);
        let mut logs: Vec<IterLog> = Vec::new();
        train_in_memory(&cfg, &samples, |l| logs.push(*l)).unwrap();
        let first = logs[0].total();
        let last = logs.last().unwrap().total();
        assert!(
            last < first * 0.8,
            "loss should clearly decrease on one repeated image: {first} -> {last}"
        );
    }

    #[test]
    fn identical_seed_reproduces_identical_parameters() {
        let cfg = tiny_cfg();
        let samples = make_samples(&cfg, 2);
        let a = train_in_memory(&cfg, &samples, |_| {}).unwrap();
        let b = train_in_memory(&cfg, &samples, |_| {}).unwrap();
        for (pa, pb) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.value.data(), pb.value.data(), "{} differs", pa.name);
        }
    }

    #[test]
    fn trained_model_stays_quiet_on_blank_images() {
        let mut cfg = tiny_cfg();
        cfg.optim_iterations = 300;
        let samples = make_samples(&cfg, 4);
        let model = train_in_memory(&cfg, &samples, |_| {}).unwrap();
        let blank = crate::pgm::GrayImage {
            width: cfg.image_size,
            height: cfg.image_size,
            pixels: vec![60; cfg.image_size * cfg.image_size],
        };
        // detect_image already applies the score floor, so a quiet model
        // returns nothing at all.
        let dets = model.detect_image(&blank).unwrap();
        assert!(
            dets.is_empty(),
            "blank image produced detections above the score floor: {dets:?}"
        );
    }

    #[test]
    fn log_line_format_is_csv() {
        let log = IterLog {
            iter: 3,
            rpn_cls: 0.5,
            rpn_reg: 0.25,
            det_cls: 0.125,
            det_reg: 0.0625,
        };
        assert_eq!(
            log.csv_line(),
            "3,0.500000,0.250000,0.125000,0.062500"
        );
    }
}
