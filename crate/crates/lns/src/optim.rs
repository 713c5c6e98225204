//! SGD with momentum and weight decay.

use crate::error::{LnsError, Result};
use crate::tensor::Tensor;

/// A trainable tensor with its momentum buffer.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub velocity: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let velocity = Tensor::zeros(value.dims());
        Param { value, velocity }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

/// `v <- momentum*v + grad + weight_decay*param; param <- param - lr*v`
pub fn sgd_step(param: &mut Param, grad: &[f32], cfg: SgdConfig) -> Result<()> {
    if grad.len() != param.value.numel() {
        return Err(LnsError::ShapeMismatch {
            op: "sgd_step",
            lhs: param.value.dims().to_vec(),
            rhs: vec![grad.len()],
        });
    }
    if cfg.lr <= 0.0 {
        return Err(LnsError::InvalidArgument { op: "sgd_step", msg: "lr must be > 0".into() });
    }
    for i in 0..grad.len() {
        let v = cfg.momentum * param.velocity.data[i]
            + grad[i]
            + cfg.weight_decay * param.value.data[i];
        param.velocity.data[i] = v;
        param.value.data[i] -= cfg.lr * v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step() {
        let mut p = Param::new(Tensor::from_vec(&[1], vec![1.0]).unwrap());
        sgd_step(&mut p, &[0.5], SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 })
            .unwrap();
        assert!((p.value.data[0] - 0.95).abs() < 1e-7);
    }

    #[test]
    fn zero_grad_keeps_param() {
        let mut p = Param::new(Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap());
        sgd_step(&mut p, &[0.0, 0.0], SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 })
            .unwrap();
        assert_eq!(p.value.data, vec![1.0, -2.0]);
    }

    #[test]
    fn momentum_unrolls_as_expected() {
        // two steps on constant grad g with momentum 0.9:
        // v1 = g, v2 = 1.9 g, total update = lr*(g + 1.9 g)
        let g = 0.4f32;
        let lr = 0.05f32;
        let mut p = Param::new(Tensor::from_vec(&[1], vec![2.0]).unwrap());
        let cfg = SgdConfig { lr, momentum: 0.9, weight_decay: 0.0 };
        sgd_step(&mut p, &[g], cfg).unwrap();
        sgd_step(&mut p, &[g], cfg).unwrap();
        let want = 2.0 - lr * (g + 1.9 * g);
        assert!((p.value.data[0] - want).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Param::new(Tensor::zeros(&[2]));
        assert!(sgd_step(&mut p, &[0.0; 3], SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 })
            .is_err());
    }
}
