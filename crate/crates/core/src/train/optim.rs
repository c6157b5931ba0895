//! SGD with Nesterov momentum.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::layers::{Param, ParamId};
use crate::tensor::{Scalar, Tensor};

/// One in-place update of a flat parameter:
///
/// ```text
/// g' = g + wd * p
/// v  = momentum * v + g'
/// p  = p - lr * (g' + momentum * v)
/// ```
pub fn sgd_nesterov_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::dim(format!(
            "param/grad/velocity lengths differ: {}/{}/{}",
            param.len(),
            grad.len(),
            velocity.len()
        )));
    }
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let g = g + weight_decay * *p;
        *v = momentum * *v + g;
        *p = *p - lr * (g + momentum * *v);
    }
    Ok(())
}

/// Optimizer state: one velocity buffer per parameter, created on first update.
#[derive(Clone, Debug)]
pub struct SgdNesterov<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<ParamId, Vec<T>>,
}

impl<T: Scalar> SgdNesterov<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn velocity(&self, p: &Param<T>) -> Option<&[T]> {
        self.velocity.get(&p.id()).map(Vec::as_slice)
    }

    /// Updates every parameter that has a gradient. Weight decay applies only to parameters
    /// flagged with `decay`. If any gradient is non-finite nothing is updated.
    pub fn step(
        &mut self,
        params: Vec<&mut Param<T>>,
        grads: &[Option<Tensor<T>>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim(format!(
                "{} parameters but {} gradient slots",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.value.shape() {
                    return Err(Error::dim(format!(
                        "gradient of {} has shape {:?}, parameter {:?}",
                        p.name,
                        g.shape(),
                        p.value.shape()
                    )));
                }
                if !g.all_finite() {
                    return Err(Error::Numeric {
                        op: format!("sgd_nesterov_step (gradient of {})", p.name),
                    });
                }
            }
        }
        let lr = T::from_f64_lossy(lr);
        let mu = T::from_f64_lossy(self.momentum);
        for (p, g) in params.into_iter().zip(grads) {
            let Some(g) = g else { continue };
            let wd = if p.decay {
                T::from_f64_lossy(self.weight_decay)
            } else {
                T::zero()
            };
            let v = self
                .velocity
                .entry(p.id())
                .or_insert_with(|| vec![T::zero(); g.numel()]);
            sgd_nesterov_step(p.value.data_mut(), g.data(), v, lr, mu, wd)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_without_momentum() {
        let mut p = [1.0f64, -2.0];
        let mut v = [0.0; 2];
        sgd_nesterov_step(&mut p, &[0.5, 1.0], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p, [1.0 - 0.05, -2.0 - 0.1]);
    }

    #[test]
    fn non_finite_gradient_aborts_whole_step() {
        let mut a = Param::new("a", Tensor::<f64>::from_f64(&[1], &[1.0]).unwrap(), true);
        let mut b = Param::new("b", Tensor::from_f64(&[1], &[1.0]).unwrap(), true);
        let grads = vec![
            Some(Tensor::from_f64(&[1], &[1.0]).unwrap()),
            Some(Tensor::from_f64(&[1], &[f64::NAN]).unwrap()),
        ];
        let mut opt = SgdNesterov::new(0.9, 0.0);
        let err = opt.step(vec![&mut a, &mut b], &grads, 0.1).unwrap_err();
        assert!(matches!(err, Error::Numeric { ref op } if op.contains("b")));
        assert_eq!(a.value.data(), &[1.0]);
    }
}
