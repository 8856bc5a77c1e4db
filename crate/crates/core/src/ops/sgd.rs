use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `v ← momentum·v + grad + weight_decay·param; param ← param − lr·v`.
pub fn sgd_update<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    cfg: &SgdConfig,
) -> Result<()> {
    if grad.shape() != param.shape() {
        return Err(Error::shape("sgd_update grad", param.shape(), grad.shape()));
    }
    if velocity.shape() != param.shape() {
        return Err(Error::shape("sgd_update velocity", param.shape(), velocity.shape()));
    }
    let lr = T::from_f64(cfg.lr);
    let mu = T::from_f64(cfg.momentum);
    let wd = T::from_f64(cfg.weight_decay);
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *v = mu * *v + g + wd * *p;
        *p = *p - lr * *v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn plain_step() {
        let cfg = SgdConfig { lr: 1.0, momentum: 0.0, weight_decay: 0.0 };
        let mut p = t(&[1.0, -2.0]);
        let mut v = t(&[0.0, 0.0]);
        sgd_update(&mut p, &t(&[0.5, 0.25]), &mut v, &cfg).unwrap();
        assert_eq!(p.data(), &[0.5, -2.25]);
    }

    #[test]
    fn zero_grad_is_a_no_op() {
        let cfg = SgdConfig { lr: 0.3, momentum: 0.9, weight_decay: 0.0 };
        let mut p = t(&[1.0, 2.0]);
        let mut v = t(&[0.0, 0.0]);
        sgd_update(&mut p, &t(&[0.0, 0.0]), &mut v, &cfg).unwrap();
        assert_eq!(p.data(), &[1.0, 2.0]);
    }

    #[test]
    fn two_momentum_steps_match_recurrence() {
        let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.01 };
        let mut p = t(&[1.0]);
        let mut v = t(&[0.0]);
        let (g1, g2) = (0.5, -0.2);
        sgd_update(&mut p, &t(&[g1]), &mut v, &cfg).unwrap();
        sgd_update(&mut p, &t(&[g2]), &mut v, &cfg).unwrap();

        let v1 = g1 + 0.01 * 1.0;
        let p1 = 1.0 - 0.1 * v1;
        let v2 = 0.9 * v1 + g2 + 0.01 * p1;
        let p2 = p1 - 0.1 * v2;
        assert_eq!(p.data(), &[p2]);
        assert_eq!(v.data(), &[v2]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        let mut p = t(&[1.0, 2.0]);
        let mut v = t(&[0.0, 0.0]);
        assert!(sgd_update(&mut p, &t(&[1.0]), &mut v, &cfg).is_err());
        let mut short = t(&[0.0]);
        assert!(sgd_update(&mut p, &t(&[1.0, 1.0]), &mut short, &cfg).is_err());
    }
}
