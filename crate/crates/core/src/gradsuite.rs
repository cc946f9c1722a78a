//! The full finite-difference verification suite over every operation with
//! a hand-written backward pass, from single layers to the composite fusion
//! and head paths. Probes are seeded, scale-disciplined, and constructed
//! away from nondifferentiable points (relu kinks, pool ties, the smooth-L1
//! elbow) so the quotient noise stays below the acceptance gate.

use crate::boxes::Bbox;
use crate::context::{roi_pool, roi_pool_backward, RegionKind};
use crate::fusion::{self, FeatureMap};
use crate::gradcheck::{check_gradient, sign_pattern_map, signed_away_from_zero, Projection};
use crate::head::{
    head_backward, head_forward, roi_fuse_backward, roi_fuse_forward, HeadParams,
    PipelineFcParams, RoiFuseParams,
};
use crate::loss::{smooth_l1, softmax_cross_entropy};
use crate::ops;
use crate::proposal::{rpn_backward, rpn_forward, RpnHeadParams};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: &'static str,
    pub error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

const TOL: f64 = 1e-4;

fn report(name: &'static str, error: f64) -> GradCheckReport {
    GradCheckReport {
        name,
        error,
        tolerance: TOL,
    }
}

fn conv2d_checks(out: &mut Vec<GradCheckReport>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let input = Tensor::uniform(&[1, 2, 5, 5], 0.02, 0.06, &mut rng);
    let weights = Tensor::uniform(&[3, 2, 3, 3], 0.15, 0.3, &mut rng);
    let bias = Tensor::uniform(&[3], 0.0, 0.05, &mut rng);
    let y0 = ops::conv2d_forward(&input, &weights, &bias, 1, 1).unwrap();
    let proj = Projection::ones(y0.numel());

    out.push(report(
        "conv2d input",
        check_gradient(
            |x| {
                let y = ops::conv2d_forward(x, &weights, &bias, 1, 1).unwrap();
                let (gin, _, _) =
                    ops::conv2d_backward(x, &weights, &proj.grad_out(y.shape()), 1, 1).unwrap();
                (proj.loss(&y), gin)
            },
            &input,
            1e-3,
        ),
    ));
    out.push(report(
        "conv2d weights",
        check_gradient(
            |w| {
                let y = ops::conv2d_forward(&input, w, &bias, 1, 1).unwrap();
                let (_, gw, _) =
                    ops::conv2d_backward(&input, w, &proj.grad_out(y.shape()), 1, 1).unwrap();
                (proj.loss(&y), gw)
            },
            &weights,
            1e-3,
        ),
    ));
    out.push(report(
        "conv2d bias",
        check_gradient(
            |b| {
                let y = ops::conv2d_forward(&input, &weights, b, 1, 1).unwrap();
                let (_, _, gb) =
                    ops::conv2d_backward(&input, &weights, &proj.grad_out(y.shape()), 1, 1)
                        .unwrap();
                (proj.loss(&y), gb)
            },
            &bias,
            1e-3,
        ),
    ));
}

fn pool_check(out: &mut Vec<GradCheckReport>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    // Distinct lattice values spaced far beyond 10 * epsilon: no argmax ties.
    let mut values: Vec<f32> = (0..2 * 6 * 6)
        .map(|i| i as f32 * 0.37 + rng.gen_range(-0.05..0.05))
        .collect();
    let mut perm_rng = ChaCha8Rng::seed_from_u64(1003);
    use rand::seq::SliceRandom;
    values.shuffle(&mut perm_rng);
    let input = Tensor::new(&[1, 2, 6, 6], values).unwrap();
    let (y0, _) = ops::max_pool2d_forward(&input, 2, 2).unwrap();
    let proj = Projection::sampled(y0.numel(), &mut rng);
    out.push(report(
        "max_pool2d input",
        check_gradient(
            |x| {
                let (y, argmax) = ops::max_pool2d_forward(x, 2, 2).unwrap();
                let gin =
                    ops::max_pool2d_backward(&argmax, &proj.grad_out(y.shape()), x.shape());
                (proj.loss(&y), gin)
            },
            &input,
            1e-3,
        ),
    ));
}

fn relu_check(out: &mut Vec<GradCheckReport>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    let input = signed_away_from_zero(&[2, 3, 4, 4], 0.05, 1.0, &mut rng);
    let proj = Projection::sampled(input.numel(), &mut rng);
    out.push(report(
        "relu input",
        check_gradient(
            |x| {
                let y = ops::relu_forward(x);
                let gin = ops::relu_backward(x, &proj.grad_out(y.shape()));
                (proj.loss(&y), gin)
            },
            &input,
            1e-3,
        ),
    ));
}

fn fc_checks(out: &mut Vec<GradCheckReport>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1005);
    let input = Tensor::uniform(&[8, 6], 0.02, 0.1, &mut rng);
    let weights = Tensor::uniform(&[4, 6], 0.15, 0.4, &mut rng);
    let bias = Tensor::uniform(&[4], 0.0, 0.05, &mut rng);
    let proj = Projection::ones(8 * 4);
    out.push(report(
        "fully_connected input",
        check_gradient(
            |x| {
                let y = ops::fully_connected_forward(x, &weights, &bias).unwrap();
                let (gin, _, _) =
                    ops::fully_connected_backward(x, &weights, &proj.grad_out(y.shape())).unwrap();
                (proj.loss(&y), gin)
            },
            &input,
            1e-3,
        ),
    ));
    out.push(report(
        "fully_connected weights",
        check_gradient(
            |w| {
                let y = ops::fully_connected_forward(&input, w, &bias).unwrap();
                let (_, gw, _) =
                    ops::fully_connected_backward(&input, w, &proj.grad_out(y.shape())).unwrap();
                (proj.loss(&y), gw)
            },
            &weights,
            1e-3,
        ),
    ));
}

fn loss_checks(out: &mut Vec<GradCheckReport>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1006);
    let logits = Tensor::uniform(&[4, 3], -1.5, 1.5, &mut rng);
    let labels = [0i32, 2, -1, 1];
    out.push(report(
        "softmax_cross_entropy logits",
        check_gradient(
            |x| {
                let (loss, grad) = softmax_cross_entropy(x, &labels).unwrap();
                (loss, grad)
            },
            &logits,
            1e-3,
        ),
    ));

    // Differences land on both branches but away from the |d| = 1 elbow.
    let target = Tensor::zeros(&[4, 2]);
    let pred = Tensor::new(
        &[4, 2],
        vec![0.4, -0.55, 1.6, -1.4, 0.25, 1.8, -0.3, -1.7],
    )
    .unwrap();
    let weights = Tensor::new(&[4, 2], vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
    out.push(report(
        "smooth_l1 pred",
        check_gradient(
            |p| {
                let (loss, grad) = smooth_l1(p, &target, &weights).unwrap();
                (loss, grad)
            },
            &pred,
            1e-3,
        ),
    ));
}

fn normalize_checks(out: &mut Vec<GradCheckReport>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1007);
    let input = Tensor::uniform(&[1, 4, 1, 1], 0.3, 1.3, &mut rng);
    let proj = Projection::sampled(4, &mut rng);
    out.push(report(
        "l2_normalize input",
        check_gradient(
            |x| {
                let (y, norms) = fusion::l2_normalize_forward(x);
                let gin = fusion::l2_normalize_backward(&proj.grad_out(y.shape()), x, &norms);
                (proj.loss(&y), gin)
            },
            &input,
            1e-3,
        ),
    ));

    let base = sign_pattern_map(2, 2, &mut rng);
    let (normalized, _) = fusion::l2_normalize_forward(&base);
    let gamma = Tensor::uniform(&[3], 0.5, 2.0, &mut rng);
    let proj2 = Projection::ones(normalized.numel());
    out.push(report(
        "scale_apply gamma",
        check_gradient(
            |g| {
                let y = fusion::scale_apply(&normalized, g).unwrap();
                let (_, gg) = fusion::scale_backward(&proj2.grad_out(y.shape()), &normalized, g);
                (proj2.loss(&y), gg)
            },
            &gamma,
            1e-3,
        ),
    ));
    out.push(report(
        "scale_apply input",
        check_gradient(
            |x| {
                let y = fusion::scale_apply(x, &gamma).unwrap();
                let (gx, _) = fusion::scale_backward(&proj2.grad_out(y.shape()), x, &gamma);
                (proj2.loss(&y), gx)
            },
            &normalized,
            1e-3,
        ),
    ));
}

fn roi_pool_check(out: &mut Vec<GradCheckReport>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1008);
    use rand::seq::SliceRandom;
    let mut values: Vec<f32> = (0..2 * 8 * 8).map(|i| i as f32 * 0.29).collect();
    values.shuffle(&mut rng);
    let map_tensor = Tensor::new(&[1, 2, 8, 8], values).unwrap();
    let bbox = Bbox::from_corners(3.0, 5.0, 29.0, 27.0);
    let proj = Projection::sampled(2 * 3 * 3, &mut rng);
    out.push(report(
        "roi_pool input",
        check_gradient(
            |x| {
                let map = FeatureMap::new(x.clone(), 4);
                let (feat, argmax) = roi_pool(&map, &bbox, 3, 0, RegionKind::Face);
                let grad_out = proj.grad_out(&[
                    feat.tensor.shape()[0],
                    feat.tensor.shape()[1],
                    feat.tensor.shape()[2],
                ]);
                let mut gmap = Tensor::zeros(x.shape());
                roi_pool_backward(&argmax, grad_out.data(), &mut gmap);
                (proj.loss(&feat.tensor), gmap)
            },
            &map_tensor,
            1e-3,
        ),
    ));
}

fn fuse_checks(out: &mut Vec<GradCheckReport>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1009);
    let low = sign_pattern_map(2, 2, &mut rng);
    let high = sign_pattern_map(2, 2, &mut rng);
    let gamma_low = Tensor::full(&[3], rng.gen_range(0.7..1.3));
    let gamma_high = Tensor::full(&[3], rng.gen_range(0.7..1.3));
    let (v0, v1) = (rng.gen_range(0.5..1.0f32), rng.gen_range(0.5..1.0f32));
    let rw = Tensor::from_fn(&[2, 6, 1, 1], |i| if i < 6 { v0 } else { v1 });
    let rb = Tensor::uniform(&[2], 0.0, 0.1, &mut rng);
    let proj = Projection::ones(2 * 4);
    let eps = 3e-3;

    let run = |low_t: &Tensor, gl: &Tensor, rw_t: &Tensor| {
        let m_low = FeatureMap::new(low_t.clone(), 8);
        let m_high = FeatureMap::new(high.clone(), 8);
        let (fused, cache) = fusion::fuse(&[&m_low, &m_high], &[gl, &gamma_high], rw_t, &rb).unwrap();
        let grads = fusion::fuse_backward(
            &cache,
            &[gl, &gamma_high],
            rw_t,
            &proj.grad_out(fused.tensor.shape()),
        )
        .unwrap();
        (proj.loss(&fused.tensor), grads)
    };
    out.push(report(
        "fuse input map",
        check_gradient(
            |x| {
                let (l, g) = run(x, &gamma_low, &rw);
                (l, g.inputs[0].clone())
            },
            &low,
            eps,
        ),
    ));
    out.push(report(
        "fuse gamma",
        check_gradient(
            |g| {
                let (l, gr) = run(&low, g, &rw);
                (l, gr.gammas[0].clone())
            },
            &gamma_low,
            eps,
        ),
    ));
    out.push(report(
        "fuse reducer",
        check_gradient(
            |w| {
                let (l, gr) = run(&low, &gamma_low, w);
                (l, gr.reducer_w.clone())
            },
            &rw,
            eps,
        ),
    ));
}

fn rpn_head_checks(out: &mut Vec<GradCheckReport>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let fused_t = Tensor::uniform(&[1, 2, 4, 4], 0.05, 0.15, &mut rng);
    let t = [
        Tensor::uniform(&[2, 2, 3, 3], 0.25, 0.5, &mut rng),
        Tensor::uniform(&[2], 0.02, 0.06, &mut rng),
        Tensor::uniform(&[2, 2, 1, 1], 0.25, 0.5, &mut rng),
        Tensor::uniform(&[2], 0.0, 0.05, &mut rng),
        Tensor::uniform(&[4, 2, 1, 1], 0.25, 0.5, &mut rng),
        Tensor::uniform(&[4], 0.0, 0.05, &mut rng),
    ];
    let proj_cls = Projection::ones(2 * 16);
    let proj_reg = Projection::ones(4 * 16);
    let run = |fused_in: &Tensor, t: &[Tensor]| {
        let fm = FeatureMap::new(fused_in.clone(), 8);
        let p = RpnHeadParams {
            conv_w: &t[0],
            conv_b: &t[1],
            cls_w: &t[2],
            cls_b: &t[3],
            reg_w: &t[4],
            reg_b: &t[5],
        };
        let (logits, deltas, cache) = rpn_forward(&fm, &p).unwrap();
        let grads = rpn_backward(
            &cache,
            &p,
            &proj_cls.grad_out(logits.shape()),
            &proj_reg.grad_out(deltas.shape()),
        )
        .unwrap();
        (proj_cls.loss(&logits) + proj_reg.loss(&deltas), grads)
    };
    out.push(report(
        "rpn head input",
        check_gradient(
            |x| {
                let (l, g) = run(x, &t);
                (l, g.fused)
            },
            &fused_t,
            3e-3,
        ),
    ));
    out.push(report(
        "rpn head conv weights",
        check_gradient(
            |w| {
                let mut t2 = t.clone();
                t2[0] = w.clone();
                let (l, g) = run(&fused_t, &t2);
                (l, g.conv_w)
            },
            &t[0],
            3e-3,
        ),
    ));
    out.push(report(
        "rpn head cls weights",
        check_gradient(
            |w| {
                let mut t2 = t.clone();
                t2[2] = w.clone();
                let (l, g) = run(&fused_t, &t2);
                (l, g.cls_w)
            },
            &t[2],
            3e-3,
        ),
    ));
}

fn fc_stack(in_dim: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![
        Tensor::uniform(&[dim, in_dim], 0.1, 0.3, rng),
        Tensor::uniform(&[dim], 0.02, 0.05, rng),
        Tensor::uniform(&[dim, dim], 0.1, 0.3, rng),
        Tensor::uniform(&[dim], 0.02, 0.05, rng),
    ]
}

fn fc_params(t: &[Tensor]) -> PipelineFcParams<'_> {
    PipelineFcParams {
        fc1_w: &t[0],
        fc1_b: &t[1],
        fc2_w: &t[2],
        fc2_b: &t[3],
    }
}

fn detection_head_checks(out: &mut Vec<GradCheckReport>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1011);
    let face_blob = Tensor::uniform(&[2, 2, 2, 2], 0.05, 0.15, &mut rng);
    let body_blob = Tensor::uniform(&[2, 2, 2, 2], 0.05, 0.15, &mut rng);
    let dim = 3;
    let face_t = fc_stack(8, dim, &mut rng);
    let body_t = fc_stack(8, dim, &mut rng);
    let cls_w = Tensor::uniform(&[2, 2 * dim], 0.1, 0.3, &mut rng);
    let cls_b = Tensor::uniform(&[2], 0.0, 0.05, &mut rng);
    let reg_w = Tensor::uniform(&[4, 2 * dim], 0.1, 0.3, &mut rng);
    let reg_b = Tensor::uniform(&[4], 0.0, 0.05, &mut rng);
    let proj_cls = Projection::ones(2 * 2);
    let proj_reg = Projection::ones(2 * 4);

    let run = |face_in: &Tensor, ft: &[Tensor], cw: &Tensor| {
        let params = HeadParams {
            face: fc_params(ft),
            body: Some(fc_params(&body_t)),
            cls_w: cw,
            cls_b: &cls_b,
            reg_w: &reg_w,
            reg_b: &reg_b,
        };
        let (cls, reg, cache) = head_forward(face_in, Some(&body_blob), &params).unwrap();
        let grads = head_backward(
            &cache,
            &params,
            face_in.shape(),
            Some(body_blob.shape()),
            &proj_cls.grad_out(cls.shape()),
            &proj_reg.grad_out(reg.shape()),
        )
        .unwrap();
        (proj_cls.loss(&cls) + proj_reg.loss(&reg), grads)
    };
    out.push(report(
        "detection head face blob",
        check_gradient(
            |x| {
                let (l, g) = run(x, &face_t, &cls_w);
                (l, g.face.blob)
            },
            &face_blob,
            1e-2,
        ),
    ));
    out.push(report(
        "detection head fc weights",
        check_gradient(
            |w| {
                let mut t2 = face_t.clone();
                t2[0] = w.clone();
                let (l, g) = run(&face_blob, &t2, &cls_w);
                (l, g.face.fc1_w)
            },
            &face_t[0],
            1e-2,
        ),
    ));
    out.push(report(
        "detection head cls weights",
        check_gradient(
            |w| {
                let (l, g) = run(&face_blob, &face_t, w);
                (l, g.cls_w)
            },
            &cls_w,
            1e-2,
        ),
    ));
}

fn roi_fuse_and_full_checks(out: &mut Vec<GradCheckReport>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1012);
    let src_a = sign_pattern_map(2, 2, &mut rng);
    let src_b = sign_pattern_map(2, 2, &mut rng);
    let gamma_a = Tensor::full(&[3], rng.gen_range(0.7..1.3));
    let gamma_b = Tensor::full(&[3], rng.gen_range(0.7..1.3));
    let (v0, v1) = (rng.gen_range(0.3..0.7f32), rng.gen_range(0.3..0.7f32));
    let rw = Tensor::from_fn(&[2, 6, 1, 1], |i| if i < 6 { v0 } else { v1 });
    let rb = Tensor::uniform(&[2], 0.02, 0.06, &mut rng);
    let boxes = [Bbox::from_corners(0.0, 0.0, 16.0, 16.0)];
    let proj_blob = Projection::ones(2 * 4);

    // roi_fuse alone: pool -> normalize -> scale -> concat -> reduce.
    let run_fuse = |a: &Tensor, ga: &Tensor| {
        let map_a = FeatureMap::new(a.clone(), 8);
        let map_b = FeatureMap::new(src_b.clone(), 16);
        let params = RoiFuseParams {
            gammas: vec![ga, &gamma_b],
            reducer_w: &rw,
            reducer_b: &rb,
        };
        let (blob, cache) =
            roi_fuse_forward(&[&map_a, &map_b], &boxes, 2, RegionKind::Face, &params).unwrap();
        let shapes = vec![a.shape().to_vec(), src_b.shape().to_vec()];
        let grads =
            roi_fuse_backward(&cache, &params, &shapes, &proj_blob.grad_out(blob.shape())).unwrap();
        (proj_blob.loss(&blob), grads)
    };
    out.push(report(
        "roi_fuse source map",
        check_gradient(
            |x| {
                let (l, g) = run_fuse(x, &gamma_a);
                (l, g.sources[0].clone())
            },
            &src_a,
            3e-3,
        ),
    ));
    out.push(report(
        "roi_fuse gamma",
        check_gradient(
            |g| {
                let (l, gr) = run_fuse(&src_a, g);
                (l, gr.gammas[0].clone())
            },
            &gamma_a,
            3e-3,
        ),
    ));

    // Full composite: roi_fuse (face and body) -> fc pipelines -> outputs.
    let dim = 3;
    let face_t = fc_stack(8, dim, &mut rng);
    let body_t = fc_stack(8, dim, &mut rng);
    let cls_w = Tensor::uniform(&[2, 2 * dim], 0.1, 0.3, &mut rng);
    let cls_b = Tensor::uniform(&[2], 0.02, 0.05, &mut rng);
    let reg_w = Tensor::uniform(&[4, 2 * dim], 0.1, 0.3, &mut rng);
    let reg_b = Tensor::uniform(&[4], 0.02, 0.05, &mut rng);
    let proj_cls = Projection::ones(2);
    let proj_reg = Projection::ones(4);
    let run_full = |a: &Tensor| {
        let map_a = FeatureMap::new(a.clone(), 8);
        let map_b = FeatureMap::new(src_b.clone(), 16);
        let fuse_params = RoiFuseParams {
            gammas: vec![&gamma_a, &gamma_b],
            reducer_w: &rw,
            reducer_b: &rb,
        };
        let (face_blob, face_cache) =
            roi_fuse_forward(&[&map_a, &map_b], &boxes, 2, RegionKind::Face, &fuse_params).unwrap();
        let (body_blob, body_cache) =
            roi_fuse_forward(&[&map_a, &map_b], &boxes, 2, RegionKind::Body, &fuse_params).unwrap();
        let head_params = HeadParams {
            face: fc_params(&face_t),
            body: Some(fc_params(&body_t)),
            cls_w: &cls_w,
            cls_b: &cls_b,
            reg_w: &reg_w,
            reg_b: &reg_b,
        };
        let (cls, reg, head_cache) =
            head_forward(&face_blob, Some(&body_blob), &head_params).unwrap();
        let hg = head_backward(
            &head_cache,
            &head_params,
            face_blob.shape(),
            Some(body_blob.shape()),
            &proj_cls.grad_out(cls.shape()),
            &proj_reg.grad_out(reg.shape()),
        )
        .unwrap();
        let shapes = vec![a.shape().to_vec(), src_b.shape().to_vec()];
        let fg = roi_fuse_backward(&face_cache, &fuse_params, &shapes, &hg.face.blob).unwrap();
        let bg = roi_fuse_backward(
            &body_cache,
            &fuse_params,
            &shapes,
            &hg.body.as_ref().unwrap().blob,
        )
        .unwrap();
        let mut sa = fg.sources[0].clone();
        for (x, y) in sa.data_mut().iter_mut().zip(bg.sources[0].data()) {
            *x += y;
        }
        (proj_cls.loss(&cls) + proj_reg.loss(&reg), sa)
    };
    out.push(report(
        "roi_fuse + detection head source map",
        check_gradient(|x| run_full(x), &src_a, 3e-3),
    ));
}

/// Runs every gradient check and returns one report per probe.
pub fn run_suite() -> Vec<GradCheckReport> {
    let mut out = Vec::new();
    conv2d_checks(&mut out);
    pool_check(&mut out);
    relu_check(&mut out);
    fc_checks(&mut out);
    loss_checks(&mut out);
    normalize_checks(&mut out);
    roi_pool_check(&mut out);
    fuse_checks(&mut out);
    rpn_head_checks(&mut out);
    detection_head_checks(&mut out);
    roi_fuse_and_full_checks(&mut out);
    out
}
