//! Multi-scale feature fusion: per-pixel L2 normalization with learnable
//! per-channel rescaling, spatial alignment by pooling, channel
//! concatenation and 1x1 reduction.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Norms below this are treated as zero pixels: the forward output is the
/// zero vector and the backward gradient vanishes.
pub const NORM_EPS: f64 = 1e-12;

/// A tensor plus its cumulative spatial stride relative to the input image.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub stride: usize,
}

impl FeatureMap {
    pub fn new(tensor: Tensor, stride: usize) -> Self {
        FeatureMap { tensor, stride }
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[3]
    }
}

/// Initial per-channel scale vector; strictly positive by construction.
pub fn init_scale(channels: usize, init_value: f32) -> Tensor {
    assert!(init_value > 0.0, "scale init must be strictly positive");
    Tensor::full(&[channels], init_value)
}

/// Per-pixel L2 normalization: at every (batch, y, x) the channel vector x
/// becomes x / max(||x||_2, eps). Returns the clamped norms for backward.
pub fn l2_normalize_forward(input: &Tensor) -> (Tensor, Vec<f64>) {
    let s = input.shape();
    assert_eq!(s.len(), 4, "l2_normalize expects 4-order input");
    let (batch, ch, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let mut out = Tensor::zeros(s);
    let mut norms = vec![0.0f64; batch * plane];
    let x = input.data();
    // Channel-major passes keep every inner loop contiguous; the per-pixel
    // channel sum still accumulates in channel order.
    let mut inv = vec![0.0f64; plane];
    for b in 0..batch {
        let sumsq = &mut norms[b * plane..][..plane];
        sumsq.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..ch {
            let row = &x[(b * ch + c) * plane..][..plane];
            for (acc, &v) in sumsq.iter_mut().zip(row) {
                *acc += v as f64 * v as f64;
            }
        }
        for (n, i) in sumsq.iter_mut().zip(inv.iter_mut()) {
            *n = n.sqrt().max(NORM_EPS);
            *i = 1.0 / *n;
        }
        for c in 0..ch {
            let row = &x[(b * ch + c) * plane..][..plane];
            let orow = &mut out.data_mut()[(b * ch + c) * plane..][..plane];
            for ((o, &v), &i) in orow.iter_mut().zip(row).zip(inv.iter()) {
                *o = (v as f64 * i) as f32;
            }
        }
    }
    (out, norms)
}

/// Jacobian-vector product of the per-pixel normalization:
/// grad_in = grad_out / ||x|| - x (x . grad_out) / ||x||^3, and exactly zero
/// at eps-clamped pixels.
pub fn l2_normalize_backward(grad_out: &Tensor, input: &Tensor, norms: &[f64]) -> Tensor {
    let s = input.shape();
    let (batch, ch, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    debug_assert_eq!(norms.len(), batch * plane);
    let mut grad_in = Tensor::zeros(s);
    let x = input.data();
    let g = grad_out.data();
    let mut dot = vec![0.0f64; plane];
    for b in 0..batch {
        dot.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..ch {
            let xrow = &x[(b * ch + c) * plane..][..plane];
            let grow = &g[(b * ch + c) * plane..][..plane];
            for ((acc, &xv), &gv) in dot.iter_mut().zip(xrow).zip(grow) {
                *acc += xv as f64 * gv as f64;
            }
        }
        let pixel_norms = &norms[b * plane..][..plane];
        for c in 0..ch {
            let xrow = &x[(b * ch + c) * plane..][..plane];
            let grow = &g[(b * ch + c) * plane..][..plane];
            let orow = &mut grad_in.data_mut()[(b * ch + c) * plane..][..plane];
            for p in 0..plane {
                let norm = pixel_norms[p];
                if norm <= NORM_EPS {
                    continue;
                }
                let inv = 1.0 / norm;
                let inv3 = inv * inv * inv;
                orow[p] = (grow[p] as f64 * inv - xrow[p] as f64 * dot[p] * inv3) as f32;
            }
        }
    }
    grad_in
}

/// Per-channel rescale y_c = gamma_c * x_c.
pub fn scale_apply(normalized: &Tensor, gamma: &Tensor) -> Result<Tensor> {
    let s = normalized.shape();
    let ch = s[1];
    if gamma.shape() != [ch] {
        return Err(Error::shape(
            "scale_apply",
            format!("gamma has {:?} entries for {ch} channels", gamma.shape()),
        ));
    }
    let plane = s[2] * s[3];
    let mut out = Tensor::zeros(s);
    for b in 0..s[0] {
        for c in 0..ch {
            let gc = gamma.data()[c];
            let base = (b * ch + c) * plane;
            for p in 0..plane {
                out.data_mut()[base + p] = gc * normalized.data()[base + p];
            }
        }
    }
    Ok(out)
}

/// Gradients of [`scale_apply`]: per-channel gamma gradient is the sum of
/// grad_out * x_hat over batch and spatial positions.
pub fn scale_backward(
    grad_out: &Tensor,
    normalized: &Tensor,
    gamma: &Tensor,
) -> (Tensor, Tensor) {
    let s = normalized.shape();
    let ch = s[1];
    let plane = s[2] * s[3];
    let mut grad_norm = Tensor::zeros(s);
    let mut grad_gamma = Tensor::zeros(&[ch]);
    for c in 0..ch {
        let gc = gamma.data()[c];
        let mut acc = 0.0f64;
        for b in 0..s[0] {
            let base = (b * ch + c) * plane;
            for p in 0..plane {
                let g = grad_out.data()[base + p];
                grad_norm.data_mut()[base + p] = gc * g;
                acc += g as f64 * normalized.data()[base + p] as f64;
            }
        }
        grad_gamma.data_mut()[c] = acc as f32;
    }
    (grad_norm, grad_gamma)
}

/// Result of aligning one map to the fusion target resolution.
#[derive(Debug, Clone)]
pub enum AlignStep {
    /// Already at target size.
    Identity,
    /// Max-pooled by an integer factor; keeps the argmax table for backward.
    Pooled { factor: usize, argmax: Vec<u32> },
}

/// Downsamples every map to the spatial extents of the target (the deepest
/// map) by integer-factor max pooling.
pub fn align_spatial(
    maps: &[&FeatureMap],
    target_stride: usize,
    target_h: usize,
    target_w: usize,
) -> Result<Vec<(Tensor, AlignStep)>> {
    let mut out = Vec::with_capacity(maps.len());
    for map in maps {
        if map.stride == target_stride {
            if map.height() != target_h || map.width() != target_w {
                return Err(Error::shape(
                    "align_spatial",
                    format!(
                        "map at stride {} is {}x{}, target is {target_h}x{target_w}",
                        map.stride,
                        map.height(),
                        map.width()
                    ),
                ));
            }
            out.push((map.tensor.clone(), AlignStep::Identity));
            continue;
        }
        if target_stride % map.stride != 0 {
            return Err(Error::shape(
                "align_spatial",
                format!(
                    "stride {} does not divide target stride {target_stride}",
                    map.stride
                ),
            ));
        }
        let factor = target_stride / map.stride;
        let (h, w) = (map.height(), map.width());
        let pooled_h = if h >= factor { (h - factor) / factor + 1 } else { 0 };
        let pooled_w = if w >= factor { (w - factor) / factor + 1 } else { 0 };
        if pooled_h != target_h || pooled_w != target_w {
            return Err(Error::shape(
                "align_spatial",
                format!(
                    "pooling {h}x{w} by {factor} gives {pooled_h}x{pooled_w}, \
                     target is {target_h}x{target_w}"
                ),
            ));
        }
        let (pooled, argmax) = ops::max_pool2d_forward(&map.tensor, factor, factor)?;
        out.push((pooled, AlignStep::Pooled { factor, argmax }));
    }
    Ok(out)
}

/// Everything the fuse backward pass needs.
#[derive(Debug, Clone)]
pub struct FuseCache {
    pub input_shapes: Vec<Vec<usize>>,
    pub align: Vec<AlignStep>,
    pub aligned: Vec<Tensor>,
    pub norms: Vec<Vec<f64>>,
    pub normalized: Vec<Tensor>,
    pub concat: Tensor,
}

/// Per-map gradients produced by [`fuse_backward`].
#[derive(Debug)]
pub struct FuseGrads {
    pub inputs: Vec<Tensor>,
    pub gammas: Vec<Tensor>,
    pub reducer_w: Tensor,
    pub reducer_b: Tensor,
}

/// Channel-concatenates per-map normalized + rescaled tensors and reduces
/// with a 1x1 convolution. Maps must already share spatial extents.
pub fn fuse_aligned(
    aligned: Vec<(Tensor, AlignStep)>,
    input_shapes: Vec<Vec<usize>>,
    gammas: &[&Tensor],
    reducer_w: &Tensor,
    reducer_b: &Tensor,
) -> Result<(Tensor, FuseCache)> {
    assert_eq!(aligned.len(), gammas.len());
    let (batch, h, w) = {
        let s = aligned[0].0.shape();
        (s[0], s[2], s[3])
    };
    for (t, _) in &aligned {
        let s = t.shape();
        if s[0] != batch || s[2] != h || s[3] != w {
            return Err(Error::shape(
                "fuse",
                format!("misaligned map {s:?}, expected batch {batch} spatial {h}x{w}"),
            ));
        }
    }

    let mut norms = Vec::with_capacity(aligned.len());
    let mut normalized = Vec::with_capacity(aligned.len());
    let mut scaled = Vec::with_capacity(aligned.len());
    for ((t, _), gamma) in aligned.iter().zip(gammas) {
        let (n, pixel_norms) = l2_normalize_forward(t);
        let s = scale_apply(&n, gamma)?;
        norms.push(pixel_norms);
        normalized.push(n);
        scaled.push(s);
    }

    let total_ch: usize = scaled.iter().map(|t| t.shape()[1]).sum();
    let mut concat = Tensor::zeros(&[batch, total_ch, h, w]);
    let plane = h * w;
    let mut c_off = 0;
    for t in &scaled {
        let ch = t.shape()[1];
        for b in 0..batch {
            let src = &t.data()[b * ch * plane..][..ch * plane];
            let dst = &mut concat.data_mut()[(b * total_ch + c_off) * plane..][..ch * plane];
            dst.copy_from_slice(src);
        }
        c_off += ch;
    }

    let reduced = ops::conv2d_forward(&concat, reducer_w, reducer_b, 1, 0)?;
    let (align, aligned_tensors): (Vec<_>, Vec<_>) =
        aligned.into_iter().map(|(t, a)| (a, t)).unzip();
    Ok((
        reduced,
        FuseCache {
            input_shapes,
            align,
            aligned: aligned_tensors,
            norms,
            normalized,
            concat,
        },
    ))
}

/// Whole-map fusion for the proposal path: align to the deepest map, then
/// normalize / rescale / concatenate / reduce. Output stride equals the
/// deepest input stride.
pub fn fuse(
    maps: &[&FeatureMap],
    gammas: &[&Tensor],
    reducer_w: &Tensor,
    reducer_b: &Tensor,
) -> Result<(FeatureMap, FuseCache)> {
    let target = maps
        .iter()
        .max_by_key(|m| m.stride)
        .ok_or_else(|| Error::invalid("fuse", "no maps given"))?;
    let (t_stride, t_h, t_w) = (target.stride, target.height(), target.width());
    let aligned = align_spatial(maps, t_stride, t_h, t_w)?;
    let shapes = maps.iter().map(|m| m.tensor.shape().to_vec()).collect();
    let (reduced, cache) = fuse_aligned(aligned, shapes, gammas, reducer_w, reducer_b)?;
    Ok((FeatureMap::new(reduced, t_stride), cache))
}

/// Backward through reduce -> split -> rescale -> normalize -> align.
pub fn fuse_backward(
    cache: &FuseCache,
    gammas: &[&Tensor],
    reducer_w: &Tensor,
    grad_out: &Tensor,
) -> Result<FuseGrads> {
    let (grad_concat, grad_rw, grad_rb) =
        ops::conv2d_backward(&cache.concat, reducer_w, grad_out, 1, 0)?;

    let s = cache.concat.shape();
    let (batch, total_ch, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;

    let mut input_grads = Vec::with_capacity(cache.aligned.len());
    let mut gamma_grads = Vec::with_capacity(cache.aligned.len());
    let mut c_off = 0;
    for (k, aligned) in cache.aligned.iter().enumerate() {
        let ch = aligned.shape()[1];
        let mut grad_scaled = Tensor::zeros(aligned.shape());
        for b in 0..batch {
            let src = &grad_concat.data()[(b * total_ch + c_off) * plane..][..ch * plane];
            let dst = &mut grad_scaled.data_mut()[b * ch * plane..][..ch * plane];
            dst.copy_from_slice(src);
        }
        c_off += ch;

        let (grad_norm, grad_gamma) = scale_backward(&grad_scaled, &cache.normalized[k], gammas[k]);
        let grad_aligned = l2_normalize_backward(&grad_norm, aligned, &cache.norms[k]);
        let grad_input = match &cache.align[k] {
            AlignStep::Identity => grad_aligned,
            AlignStep::Pooled { argmax, .. } => {
                ops::max_pool2d_backward(argmax, &grad_aligned, &cache.input_shapes[k])
            }
        };
        input_grads.push(grad_input);
        gamma_grads.push(grad_gamma);
    }

    Ok(FuseGrads {
        inputs: input_grads,
        gammas: gamma_grads,
        reducer_w: grad_rw,
        reducer_b: grad_rb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, Projection};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn three_four_five_triple() {
        let input = Tensor::new(&[1, 2, 1, 1], vec![3.0, 4.0]).unwrap();
        let (out, norms) = l2_normalize_forward(&input);
        assert!((out.data()[0] - 0.6).abs() < 1e-7);
        assert!((out.data()[1] - 0.8).abs() < 1e-7);
        assert!((norms[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn zero_vector_stays_zero_without_nan() {
        let input = Tensor::zeros(&[1, 3, 2, 2]);
        let (out, _) = l2_normalize_forward(&input);
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(out.is_finite());
    }

    #[test]
    fn output_pixels_have_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let input = Tensor::uniform(&[2, 5, 3, 4], -2.0, 2.0, &mut rng);
        let (out, _) = l2_normalize_forward(&input);
        let plane = 12;
        for b in 0..2 {
            for p in 0..plane {
                let mut sumsq = 0.0f64;
                for c in 0..5 {
                    let v = out.data()[b * 5 * plane + c * plane + p] as f64;
                    sumsq += v * v;
                }
                assert!(
                    (sumsq.sqrt() - 1.0).abs() < 1e-6,
                    "pixel norm {} != 1",
                    sumsq.sqrt()
                );
            }
        }
    }

    #[test]
    fn normalization_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let input = Tensor::uniform(&[1, 4, 2, 2], 0.1, 1.5, &mut rng);
        let scaled = Tensor::from_fn(input.shape(), |i| input.data()[i] * 1000.0);
        let (a, _) = l2_normalize_forward(&input);
        let (b, _) = l2_normalize_forward(&scaled);
        for i in 0..a.numel() {
            assert!(
                (a.data()[i] - b.data()[i]).abs() < 1e-5,
                "scale invariance broke at {i}"
            );
        }
    }

    #[test]
    fn backward_annihilates_radial_direction() {
        // grad_out parallel to x must produce zero input gradient.
        let input = Tensor::new(&[1, 3, 1, 1], vec![1.0, 2.0, 2.0]).unwrap();
        let grad_out = Tensor::new(&[1, 3, 1, 1], vec![0.5, 1.0, 1.0]).unwrap();
        let (_, norms) = l2_normalize_forward(&input);
        let gin = l2_normalize_backward(&grad_out, &input, &norms);
        for &g in gin.data() {
            assert!(g.abs() < 1e-7, "radial gradient leaked: {g}");
        }
    }

    #[test]
    fn single_channel_gradient_vanishes() {
        let input = Tensor::new(&[1, 1, 2, 2], vec![0.7, -1.2, 3.0, 0.4]).unwrap();
        let grad_out = Tensor::full(&[1, 1, 2, 2], 1.0);
        let (_, norms) = l2_normalize_forward(&input);
        let gin = l2_normalize_backward(&grad_out, &input, &norms);
        for &g in gin.data() {
            assert!(g.abs() < 1e-7, "1-channel normalize is constant: {g}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let input = Tensor::uniform(&[1, 4, 1, 1], 0.3, 1.3, &mut rng);
        let proj = Projection::sampled(4, &mut rng);
        let err = check_gradient(
            |x| {
                let (y, norms) = l2_normalize_forward(x);
                let gin = l2_normalize_backward(&proj.grad_out(y.shape()), x, &norms);
                (proj.loss(&y), gin)
            },
            &input,
            1e-3,
        );
        assert!(err < 1e-4, "l2 normalize gradient check failed: {err}");
    }

    #[test]
    fn backward_is_orthogonal_to_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        for _ in 0..50 {
            let input = Tensor::uniform(&[1, 6, 1, 1], -1.5, 1.5, &mut rng);
            let grad_out = Tensor::uniform(&[1, 6, 1, 1], -1.0, 1.0, &mut rng);
            let (_, norms) = l2_normalize_forward(&input);
            let gin = l2_normalize_backward(&grad_out, &input, &norms);
            let mut dot = 0.0f64;
            let mut nx = 0.0f64;
            let mut ng = 0.0f64;
            for c in 0..6 {
                dot += gin.data()[c] as f64 * input.data()[c] as f64;
                nx += (input.data()[c] as f64).powi(2);
                ng += (gin.data()[c] as f64).powi(2);
            }
            let denom = (nx.sqrt() * ng.sqrt()).max(1e-12);
            assert!(
                dot.abs() / denom < 1e-5,
                "grad_in not orthogonal to pixel vector: {}",
                dot.abs() / denom
            );
        }
    }

    #[test]
    fn scale_identity_and_doubling() {
        let input = Tensor::new(&[1, 1, 1, 2], vec![1.0, -1.0]).unwrap();
        let ones = init_scale(1, 1.0);
        let out = scale_apply(&input, &ones).unwrap();
        assert_eq!(out.data(), input.data());

        let two = init_scale(1, 2.0);
        let out = scale_apply(&input, &two).unwrap();
        assert_eq!(out.data(), &[2.0, -2.0]);

        let grad_out = Tensor::new(&[1, 1, 1, 2], vec![0.5, 0.25]).unwrap();
        let (_, grad_gamma) = scale_backward(&grad_out, &input, &two);
        assert!((grad_gamma.data()[0] - (0.5 - 0.25)).abs() < 1e-7);
    }

    #[test]
    fn scale_rejects_channel_mismatch() {
        let input = Tensor::zeros(&[1, 3, 2, 2]);
        let gamma = init_scale(2, 1.0);
        assert!(scale_apply(&input, &gamma).is_err());
    }

    #[test]
    fn gamma_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let base = Tensor::uniform(&[1, 3, 2, 2], -1.0, 1.0, &mut rng);
        let (normalized, _) = l2_normalize_forward(&base);
        let gamma = Tensor::uniform(&[3], 0.5, 2.0, &mut rng);
        let proj = Projection::sampled(normalized.numel(), &mut rng);
        let err = check_gradient(
            |g| {
                let y = scale_apply(&normalized, g).unwrap();
                let (_, grad_gamma) = scale_backward(&proj.grad_out(y.shape()), &normalized, g);
                (proj.loss(&y), grad_gamma)
            },
            &gamma,
            1e-3,
        );
        assert!(err < 1e-4, "gamma gradient check failed: {err}");
    }

    #[test]
    fn align_pools_by_stride_ratio() {
        let c3 = FeatureMap::new(Tensor::from_fn(&[1, 1, 8, 8], |i| i as f32), 4);
        let c4 = FeatureMap::new(Tensor::from_fn(&[1, 1, 4, 4], |i| i as f32), 8);
        let c5 = FeatureMap::new(Tensor::from_fn(&[1, 1, 2, 2], |i| i as f32), 16);
        let aligned = align_spatial(&[&c3, &c4, &c5], 16, 2, 2).unwrap();
        assert!(matches!(aligned[0].1, AlignStep::Pooled { factor: 4, .. }));
        assert!(matches!(aligned[1].1, AlignStep::Pooled { factor: 2, .. }));
        assert!(matches!(aligned[2].1, AlignStep::Identity));
        for (t, _) in &aligned {
            assert_eq!(&t.shape()[2..], &[2, 2]);
        }
        // Map already at target size comes back unchanged.
        assert_eq!(aligned[2].0.data(), c5.tensor.data());
    }

    #[test]
    fn align_rejects_non_integer_factor() {
        let a = FeatureMap::new(Tensor::zeros(&[1, 1, 6, 6]), 3);
        let err = align_spatial(&[&a], 8, 2, 2).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains('8'), "diagnostic: {msg}");
    }

    #[test]
    fn fuse_single_map_identity_reducer_is_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let map = FeatureMap::new(Tensor::uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut rng), 8);
        let gamma = init_scale(2, 1.0);
        // 1x1 identity reducer: out channel c copies in channel c.
        let mut rw = Tensor::zeros(&[2, 2, 1, 1]);
        rw.data_mut()[0] = 1.0;
        rw.data_mut()[3] = 1.0;
        let rb = Tensor::zeros(&[2]);
        let (fused, _) = fuse(&[&map], &[&gamma], &rw, &rb).unwrap();
        let (want, _) = l2_normalize_forward(&map.tensor);
        for i in 0..want.numel() {
            assert!((fused.tensor.data()[i] - want.data()[i]).abs() < 1e-6);
        }
        assert_eq!(fused.stride, 8);
    }

    #[test]
    fn fuse_concatenates_vgg_channel_widths() {
        let maps = [
            FeatureMap::new(Tensor::zeros(&[1, 256, 4, 4]), 4),
            FeatureMap::new(Tensor::zeros(&[1, 512, 2, 2]), 8),
            FeatureMap::new(Tensor::zeros(&[1, 512, 1, 1]), 16),
        ];
        let gammas = [
            init_scale(256, 66.84),
            init_scale(512, 94.52),
            init_scale(512, 94.52),
        ];
        let rw = Tensor::zeros(&[8, 1280, 1, 1]);
        let rb = Tensor::zeros(&[8]);
        let refs: Vec<&FeatureMap> = maps.iter().collect();
        let grefs: Vec<&Tensor> = gammas.iter().collect();
        let (fused, cache) = fuse(&refs, &grefs, &rw, &rb).unwrap();
        assert_eq!(cache.concat.shape()[1], 1280);
        assert_eq!(fused.tensor.shape(), &[1, 8, 1, 1]);
    }

    #[test]
    fn fuse_is_invariant_to_input_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let base = Tensor::uniform(&[1, 3, 2, 2], 0.2, 1.0, &mut rng);
        let big = Tensor::from_fn(base.shape(), |i| base.data()[i] * 1000.0);
        let gamma = init_scale(3, 1.7);
        let rw = Tensor::uniform(&[2, 3, 1, 1], -1.0, 1.0, &mut rng);
        let rb = Tensor::zeros(&[2]);
        let m1 = FeatureMap::new(base, 8);
        let m2 = FeatureMap::new(big, 8);
        let (a, _) = fuse(&[&m1], &[&gamma], &rw, &rb).unwrap();
        let (b, _) = fuse(&[&m2], &[&gamma], &rw, &rb).unwrap();
        for i in 0..a.tensor.numel() {
            assert!(
                (a.tensor.data()[i] - b.tensor.data()[i]).abs() < 1e-5,
                "norm invariance broke at {i}"
            );
        }
    }

    #[test]
    fn fuse_rejects_misaligned_maps() {
        let a = FeatureMap::new(Tensor::zeros(&[1, 1, 4, 4]), 8);
        let b = FeatureMap::new(Tensor::zeros(&[1, 1, 3, 3]), 8);
        let gamma = init_scale(1, 1.0);
        let rw = Tensor::zeros(&[1, 2, 1, 1]);
        let rb = Tensor::zeros(&[1]);
        assert!(fuse(&[&a, &b], &[&gamma, &gamma], &rw, &rb).is_err());
    }

    #[test]
    fn composite_fuse_gradient_check_on_micro_input() {
        // Two maps, 3 channels each, probed with sign-pattern pixels plus
        // uniform gammas and constant-row reducer weights: every gradient
        // coordinate stays bounded away from the f32 noise floor.
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let low = crate::gradcheck::sign_pattern_map(2, 2, &mut rng);
        let high = crate::gradcheck::sign_pattern_map(2, 2, &mut rng);
        let gamma_low = Tensor::full(&[3], rng.gen_range(0.7..1.3));
        let gamma_high = Tensor::full(&[3], rng.gen_range(0.7..1.3));
        let (v0, v1) = (rng.gen_range(0.5..1.0f32), rng.gen_range(0.5..1.0f32));
        let rw = Tensor::from_fn(&[2, 6, 1, 1], |i| if i < 6 { v0 } else { v1 });
        let rb = Tensor::uniform(&[2], 0.0, 0.1, &mut rng);
        let proj = Projection::ones(2 * 4);
        let eps = 3e-3;

        let run = |low_t: &Tensor, high_t: &Tensor, gl: &Tensor, rw_t: &Tensor, rb_t: &Tensor| {
            let m_low = FeatureMap::new(low_t.clone(), 8);
            let m_high = FeatureMap::new(high_t.clone(), 8);
            let (fused, cache) = fuse(&[&m_low, &m_high], &[gl, &gamma_high], rw_t, rb_t).unwrap();
            let grads =
                fuse_backward(&cache, &[gl, &gamma_high], rw_t, &proj.grad_out(fused.tensor.shape()))
                    .unwrap();
            (proj.loss(&fused.tensor), grads)
        };

        let err = check_gradient(
            |x| {
                let (loss, grads) = run(x, &high, &gamma_low, &rw, &rb);
                (loss, grads.inputs[0].clone())
            },
            &low,
            eps,
        );
        assert!(err < 1e-4, "fuse low-map input grad failed: {err}");

        let err = check_gradient(
            |x| {
                let (loss, grads) = run(&low, x, &gamma_low, &rw, &rb);
                (loss, grads.inputs[1].clone())
            },
            &high,
            eps,
        );
        assert!(err < 1e-4, "fuse high-map input grad failed: {err}");

        let err = check_gradient(
            |g| {
                let (loss, grads) = run(&low, &high, g, &rw, &rb);
                (loss, grads.gammas[0].clone())
            },
            &gamma_low,
            eps,
        );
        assert!(err < 1e-4, "fuse gamma grad failed: {err}");

        let err = check_gradient(
            |w| {
                let (loss, grads) = run(&low, &high, &gamma_low, w, &rb);
                (loss, grads.reducer_w.clone())
            },
            &rw,
            eps,
        );
        assert!(err < 1e-4, "fuse reducer grad failed: {err}");

        let err = check_gradient(
            |b| {
                let (loss, grads) = run(&low, &high, &gamma_low, &rw, b);
                (loss, grads.reducer_b.clone())
            },
            &rb,
            eps,
        );
        assert!(err < 1e-4, "fuse reducer bias grad failed: {err}");
    }
}
