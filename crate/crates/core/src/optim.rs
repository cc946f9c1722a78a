//! Momentum SGD over a parameter arena.

use crate::error::{Error, Result};
use crate::tensor::Params;

/// Classic momentum SGD with L2 weight decay:
///
/// v <- momentum * v + (g + weight_decay * w)
/// w <- w - lr * v
///
/// Gradient accumulators are zeroed after a successful step. A non-finite
/// gradient aborts the step before any parameter is touched.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid("sgd_step", format!("lr {lr} must be >= 0")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(
                "sgd_step",
                format!("momentum {momentum} must be in [0, 1)"),
            ));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::invalid(
                "sgd_step",
                format!("weight_decay {weight_decay} must be >= 0"),
            ));
        }
        Ok(Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    pub fn step(&mut self, params: &mut Params) -> Result<()> {
        for p in params.iter() {
            if !p.grad_accum.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient of parameter '{}'", p.name),
                });
            }
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        }
        for (p, vel) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let g = p.grad_accum.data();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let update = g[i] + self.weight_decay * w[i];
                vel[i] = self.momentum * vel[i] + update;
                w[i] -= self.lr * vel[i];
            }
            p.grad_accum.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(value: f32, grad: f32) -> Params {
        let mut ps = Params::new();
        let id = ps.register("w", Tensor::new(&[1], vec![value]).unwrap());
        ps.get_mut(id).grad_accum.data_mut()[0] = grad;
        ps
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut ps = one_param(1.0, 123.0);
        let mut sgd = Sgd::new(0.0, 0.9, 0.01).unwrap();
        for _ in 0..5 {
            ps.get_mut(crate::tensor::ParamId(0)).grad_accum.data_mut()[0] = 123.0;
            sgd.step(&mut ps).unwrap();
        }
        assert_eq!(ps.value(crate::tensor::ParamId(0)).data()[0], 1.0);
    }

    #[test]
    fn plain_gradient_step() {
        let mut ps = one_param(1.0, 0.5);
        let mut sgd = Sgd::new(0.1, 0.0, 0.0).unwrap();
        sgd.step(&mut ps).unwrap();
        assert!((ps.value(crate::tensor::ParamId(0)).data()[0] - 0.95).abs() < 1e-7);
    }

    #[test]
    fn momentum_unrolled_by_hand() {
        // g = 1 each step, lr = 0.1, mu = 0.9, w0 = 0:
        // v1 = 1, w1 = -0.1; v2 = 1.9, w2 = -0.29.
        let mut ps = one_param(0.0, 1.0);
        let mut sgd = Sgd::new(0.1, 0.9, 0.0).unwrap();
        sgd.step(&mut ps).unwrap();
        ps.get_mut(crate::tensor::ParamId(0)).grad_accum.data_mut()[0] = 1.0;
        sgd.step(&mut ps).unwrap();
        assert!((ps.value(crate::tensor::ParamId(0)).data()[0] - (-0.29)).abs() < 1e-6);
    }

    #[test]
    fn grads_are_zeroed_after_step() {
        let mut ps = one_param(1.0, 0.5);
        let mut sgd = Sgd::new(0.1, 0.0, 0.0).unwrap();
        sgd.step(&mut ps).unwrap();
        assert_eq!(ps.get(crate::tensor::ParamId(0)).grad_accum.data()[0], 0.0);
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut ps = one_param(1.0, f32::NAN);
        let mut sgd = Sgd::new(0.1, 0.0, 0.0).unwrap();
        assert!(sgd.step(&mut ps).is_err());
        assert_eq!(ps.value(crate::tensor::ParamId(0)).data()[0], 1.0);
    }

    #[test]
    fn hyperparameters_are_validated() {
        assert!(Sgd::new(-0.1, 0.0, 0.0).is_err());
        assert!(Sgd::new(0.1, 1.0, 0.0).is_err());
        assert!(Sgd::new(0.1, 0.0, -1.0).is_err());
    }
}
