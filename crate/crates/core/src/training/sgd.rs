use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::tensor::{Param, Real};

/// Step-decay schedule: `base_lr * factor^(anchors <= epoch)`.
pub fn lr_at(epoch: usize, base_lr: f64, decay_epochs: &[usize], decay_factor: f64) -> f64 {
    let k = decay_epochs.iter().filter(|&&a| a <= epoch).count();
    base_lr * decay_factor.powi(k as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl Schedule {
    pub fn new(base_lr: f64, decay_epochs: Vec<usize>, decay_factor: f64) -> Result<Self> {
        if !(base_lr > 0.0) {
            return Err(arg_err("schedule", format!("base lr {base_lr} must be positive")));
        }
        if decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(arg_err(
                "schedule",
                format!("decay epochs {decay_epochs:?} must be strictly increasing"),
            ));
        }
        if !(decay_factor > 0.0 && decay_factor <= 1.0) {
            return Err(arg_err("schedule", format!("decay factor {decay_factor} outside (0, 1]")));
        }
        Ok(Self {
            base_lr,
            decay_epochs,
            decay_factor,
        })
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        lr_at(epoch, self.base_lr, &self.decay_epochs, self.decay_factor)
    }
}

/// SGD with optional Nesterov momentum and L2 weight decay.
///
/// Velocity buffers are matched to parameters by position, so the same
/// parameter list must be passed in the same order on every step.
#[derive(Debug, Clone)]
pub struct SgdState<T> {
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Real> SgdState<T> {
    pub fn new(momentum: f64, nesterov: bool, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(arg_err("sgd", format!("momentum {momentum} outside [0, 1)")));
        }
        if !(weight_decay >= 0.0) {
            return Err(arg_err("sgd", format!("weight decay {weight_decay} is negative")));
        }
        Ok(Self {
            momentum,
            nesterov,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self, index: usize) -> Option<&[T]> {
        self.velocity.get(index).and_then(|v| v.as_deref())
    }

    /// Update every parameter that has a gradient, consuming the gradient.
    /// Parameters without one (frozen or unused this step) are left as is.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param<T>>, lr: f64) -> Result<()> {
        let mu = T::from_f64_lossy(self.momentum);
        let wd = T::from_f64_lossy(self.weight_decay);
        let lr = T::from_f64_lossy(lr);
        for (i, p) in params.into_iter().enumerate() {
            if self.velocity.len() <= i {
                self.velocity.resize(i + 1, None);
            }
            let Some(grad) = p.grad.take() else { continue };
            if grad.shape() != p.value.shape() {
                return Err(shape_err(
                    "sgd_step",
                    format!("gradient {:?} for {} of shape {:?}", grad.shape(), p.name, p.value.shape()),
                ));
            }
            let v = self.velocity[i].get_or_insert_with(|| vec![T::zero(); grad.numel()]);
            if v.len() != grad.numel() {
                return Err(shape_err(
                    "sgd_step",
                    format!("velocity of {} elements for {} with {}", v.len(), p.name, grad.numel()),
                ));
            }
            for ((w, &g), v) in p.value.data_mut().iter_mut().zip(grad.data()).zip(v.iter_mut()) {
                let g = g + wd * *w;
                *v = mu * *v + g;
                let update = if self.nesterov { g + mu * *v } else { *v };
                *w -= lr * update;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn param(v: f64, g: Option<f64>) -> Param<f64> {
        let mut p = Param::new("p", Tensor::from_f64(&[1], &[v]).unwrap());
        p.grad = g.map(|g| Tensor::from_f64(&[1], &[g]).unwrap());
        p
    }

    #[test]
    fn schedule_anchors() {
        let anchors = [150, 180, 210];
        let lr = |e| lr_at(e, 0.1, &anchors, 0.1);
        assert_eq!(lr(0), 0.1);
        assert!((lr(150) - 0.01).abs() < 1e-15);
        assert!((lr(179) - 0.01).abs() < 1e-15);
        assert!((lr(239) - 0.0001).abs() < 1e-15);
        assert!(Schedule::new(0.1, vec![10, 10], 0.1).is_err());
    }

    #[test]
    fn plain_gradient_descent() {
        let mut p = param(1.0, Some(1.0));
        let mut sgd = SgdState::new(0.0, false, 0.0).unwrap();
        sgd.step([&mut p], 0.1).unwrap();
        assert!((p.value.item() - 0.9).abs() < 1e-15);
        assert!(p.grad.is_none());
    }

    #[test]
    fn momentum_carries_over() {
        let mut p = param(1.0, Some(1.0));
        let mut sgd = SgdState::new(0.9, false, 0.0).unwrap();
        sgd.step([&mut p], 0.1).unwrap();
        let after_first = p.value.item();
        p.grad = Some(Tensor::from_f64(&[1], &[0.0]).unwrap());
        sgd.step([&mut p], 0.1).unwrap();
        // v = 0.9 * 1.0, p moves by lr * v
        assert!((after_first - p.value.item() - 0.1 * 0.9).abs() < 1e-15);
    }

    #[test]
    fn nesterov_two_steps() {
        let mut p = param(1.0, Some(1.0));
        let mut sgd = SgdState::new(0.9, true, 0.0).unwrap();
        sgd.step([&mut p], 0.1).unwrap();
        // v = 1, update = 1 + 0.9
        assert!((p.value.item() - (1.0 - 0.19)).abs() < 1e-15);
        p.grad = Some(Tensor::from_f64(&[1], &[0.0]).unwrap());
        sgd.step([&mut p], 0.1).unwrap();
        // v = 0.9, update = 0 + 0.81
        assert!((p.value.item() - (1.0 - 0.19 - 0.081)).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_shrinks() {
        let mut p = param(2.0, Some(0.0));
        let mut sgd = SgdState::new(0.0, true, 0.0005).unwrap();
        sgd.step([&mut p], 0.1).unwrap();
        assert!((p.value.item() - 2.0 * (1.0 - 0.1 * 0.0005)).abs() < 1e-15);
    }

    #[test]
    fn skips_params_without_grad_and_rejects_bad_shapes() {
        let mut p = param(1.0, None);
        let mut sgd = SgdState::new(0.9, true, 0.1).unwrap();
        sgd.step([&mut p], 0.1).unwrap();
        assert_eq!(p.value.item(), 1.0);
        p.grad = Some(Tensor::zeros(&[2]));
        assert!(sgd.step([&mut p], 0.1).is_err());
        assert!(SgdState::<f64>::new(1.0, true, 0.0).is_err());
    }
}
