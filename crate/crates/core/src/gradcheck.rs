//! Central finite-difference gradient checking.

use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Max relative disagreement between an analytic gradient and central finite
/// differences.
///
/// `f` maps an input tensor to a scalar plus the analytic gradient of that
/// scalar w.r.t. the input. Every coordinate is probed with a +-epsilon
/// central difference; the realized step is recomputed from the rounded f32
/// values so step quantization does not pollute the quotient. The reported
/// error is max over coordinates of
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
pub fn check_gradient<F>(f: F, input: &Tensor, epsilon: f32) -> f64
where
    F: Fn(&Tensor) -> (f64, Tensor),
{
    let (_, analytic) = f(input);
    assert_eq!(
        analytic.shape(),
        input.shape(),
        "analytic gradient shape must match input"
    );
    let mut worst = 0.0f64;
    let mut probe = input.clone();
    for i in 0..input.numel() {
        let x0 = input.data()[i];
        let plus = x0 + epsilon;
        let minus = x0 - epsilon;
        probe.data_mut()[i] = plus;
        let (f_plus, _) = f(&probe);
        probe.data_mut()[i] = minus;
        let (f_minus, _) = f(&probe);
        probe.data_mut()[i] = x0;

        let h = plus as f64 - minus as f64;
        let numeric = (f_plus - f_minus) / h;
        let a = analytic.data()[i] as f64;
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

/// Fixed +-1 projection that turns a tensor-valued op into a scalar: the
/// probe loss is sum(c .* y) and the matching upstream gradient is c itself.
#[derive(Debug, Clone)]
pub struct Projection {
    coeffs: Vec<f32>,
}

impl Projection {
    pub fn sampled(numel: usize, rng: &mut ChaCha8Rng) -> Self {
        Projection {
            coeffs: (0..numel)
                .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
                .collect(),
        }
    }

    pub fn loss(&self, output: &Tensor) -> f64 {
        assert_eq!(output.numel(), self.coeffs.len());
        output
            .data()
            .iter()
            .zip(&self.coeffs)
            .map(|(&y, &c)| y as f64 * c as f64)
            .sum()
    }

    pub fn grad_out(&self, shape: &[usize]) -> Tensor {
        Tensor::new(shape, self.coeffs.clone()).expect("projection length matches shape")
    }
}

impl Projection {
    /// All-ones projection: with positive weights this bounds every input
    /// and weight gradient away from zero, which keeps the finite-difference
    /// quotient well above the f32 storage noise floor.
    pub fn ones(numel: usize) -> Self {
        Projection {
            coeffs: vec![1.0; numel],
        }
    }
}

/// Uniform values whose magnitudes stay in [lo, hi], signs random; keeps
/// probe points away from the nondifferentiable zero crossings of relu-like
/// ops.
pub fn signed_away_from_zero(
    shape: &[usize],
    lo: f32,
    hi: f32,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let mag = rng.gen_range(lo..hi);
        if rng.gen::<bool>() {
            mag
        } else {
            -mag
        }
    })
}

/// The six 3-channel sign patterns that are not all-same-sign. A pixel vector
/// s * pattern normalizes to pattern / sqrt(3), so per-pixel L2 normalization
/// of such maps is never radial-degenerate.
const SIGN_PATTERNS: [[f32; 3]; 6] = [
    [1.0, 1.0, -1.0],
    [1.0, -1.0, 1.0],
    [-1.0, 1.0, 1.0],
    [-1.0, -1.0, 1.0],
    [-1.0, 1.0, -1.0],
    [1.0, -1.0, -1.0],
];

/// A 3-channel probe map for checking normalize-then-fuse composites.
///
/// Each pixel is a random magnitude times a sign pattern; one pixel carries a
/// different pattern than the rest so that every per-channel sum of the
/// normalized map is bounded away from zero. This keeps every downstream
/// gradient coordinate (inputs, scales, reducer weights) well above the f32
/// storage noise floor that a central difference can resolve.
pub fn sign_pattern_map(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    assert!(h * w >= 4, "need at least 4 pixels for bounded column sums");
    let a = rng.gen_range(0..6);
    let b = (a + 1 + rng.gen_range(0..5)) % 6;
    let odd_pixel = rng.gen_range(0..h * w);
    let plane = h * w;
    let mut t = Tensor::zeros(&[1, 3, h, w]);
    for p in 0..plane {
        let pattern = if p == odd_pixel {
            &SIGN_PATTERNS[b]
        } else {
            &SIGN_PATTERNS[a]
        };
        let s = rng.gen_range(0.5..1.0f32);
        for c in 0..3 {
            t.data_mut()[c * plane + p] = s * pattern[c];
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use rand::SeedableRng;

    #[test]
    fn linear_op_is_exact() {
        let input = Tensor::new(&[4], vec![0.5, -1.25, 2.0, 3.5]).unwrap();
        let err = check_gradient(
            |x| {
                let loss: f64 = x.data().iter().map(|&v| 2.0 * v as f64).sum();
                (loss, Tensor::full(x.shape(), 2.0))
            },
            &input,
            1e-3,
        );
        assert!(err < 1e-10, "linear op should differentiate exactly: {err}");
    }

    #[test]
    fn relu_checks_away_from_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // |x| > 10 * epsilon keeps the probe clear of the kink at 0.
        let input = signed_away_from_zero(&[2, 3, 4, 4], 0.05, 1.0, &mut rng);
        let proj = Projection::sampled(input.numel(), &mut rng);
        let err = check_gradient(
            |x| {
                let y = ops::relu_forward(x);
                let grad = ops::relu_backward(x, &proj.grad_out(y.shape()));
                (proj.loss(&y), grad)
            },
            &input,
            1e-3,
        );
        assert!(err < 1e-4, "relu gradient check failed: {err}");
    }

    #[test]
    fn conv2d_micro_input() {
        // Small input magnitudes keep the f32 output values (and thus
        // storage rounding) tiny while the input gradient, a sum of weights,
        // stays O(1): the quotient noise sits far below the 1e-4 gate.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let input = Tensor::uniform(&[1, 2, 5, 5], 0.02, 0.1, &mut rng);
        let weights = Tensor::uniform(&[3, 2, 3, 3], 0.5, 1.0, &mut rng);
        let bias = Tensor::uniform(&[3], 0.0, 0.1, &mut rng);
        let out = ops::conv2d_forward(&input, &weights, &bias, 1, 1).unwrap();
        let proj = Projection::ones(out.numel());
        let err = check_gradient(
            |x| {
                let y = ops::conv2d_forward(x, &weights, &bias, 1, 1).unwrap();
                let (gin, _, _) =
                    ops::conv2d_backward(x, &weights, &proj.grad_out(y.shape()), 1, 1).unwrap();
                (proj.loss(&y), gin)
            },
            &input,
            1e-3,
        );
        assert!(err < 1e-4, "conv2d input gradient check failed: {err}");
    }
}
