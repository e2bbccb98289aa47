//! Decoupled-weight-decay adaptive-moment optimizer and global-norm clipping.

use crate::tensor::ParamSet;
use ndarray::{ArrayD, IxDyn};

pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
    /// Completed updates (for bias correction).
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = |p: &crate::tensor::ParamRef| ArrayD::zeros(IxDyn(&p.shape()));
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: params.iter().map(&zeros).collect(),
            v: params.iter().map(&zeros).collect(),
            t: 0,
        }
    }

    /// One update. Weight decay is decoupled: `theta *= 1 - lr * wd` before
    /// the moment step, so a zero gradient still shrinks the weights.
    pub fn step(&mut self, params: &ParamSet, grads: &[ArrayD<f64>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter().enumerate() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(g).for_each(|mv, &gv| {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|vv, &gv| {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
            });
            let mut theta = (*p.value()).clone();
            let decay = 1.0 - lr * self.weight_decay;
            ndarray::Zip::from(&mut theta)
                .and(&*m)
                .and(&*v)
                .for_each(|t, &mv, &vv| {
                    let m_hat = mv / bc1;
                    let v_hat = vv / bc2;
                    *t = *t * decay - lr * m_hat / (v_hat.sqrt() + self.eps);
                });
            p.set_value(theta);
        }
    }
}

/// Global L2 norm over all gradient arrays.
pub fn global_grad_norm(grads: &[ArrayD<f64>]) -> f64 {
    grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Scale gradients so the global norm does not exceed `clip`. Returns the
/// pre-clip norm.
pub fn clip_global_norm(grads: &mut [ArrayD<f64>], clip: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > clip && norm > 0.0 {
        let scale = clip / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamSet;
    use ndarray::arr1;

    #[test]
    fn zero_gradient_update_is_pure_weight_decay() {
        let mut set = ParamSet::new();
        let p = set.register("w", arr1(&[2.0, -4.0]).into_dyn());
        let mut opt = AdamW::new(&set, 0.9, 0.999, 1e-8, 0.05);
        let grads = vec![ArrayD::zeros(IxDyn(&[2]))];
        opt.step(&set, &grads, 0.1);
        let v = p.value();
        assert!((v[[0]] - 2.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-12);
        assert!((v[[1]] - -4.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-12);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut grads = vec![
            arr1(&[3.0, 0.0]).into_dyn(),
            arr1(&[0.0, 4.0]).into_dyn(), // global norm 5
        ];
        let pre = clip_global_norm(&mut grads, 1.0);
        assert!((pre - 5.0).abs() < 1e-12);
        let post = global_grad_norm(&grads);
        assert!((post - 1.0).abs() < 1e-6);

        // Below the threshold nothing changes.
        let mut small = vec![arr1(&[0.3]).into_dyn()];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][[0]], 0.3);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut set = ParamSet::new();
        let p = set.register("w", arr1(&[1.0]).into_dyn());
        let mut opt = AdamW::new(&set, 0.9, 0.999, 1e-8, 0.0);
        for _ in 0..10 {
            let grads = vec![arr1(&[2.0]).into_dyn()];
            opt.step(&set, &grads, 0.01);
        }
        assert!(p.value()[[0]] < 1.0);
    }
}
