use crate::error::{LmnError, Result};
use crate::numcore::ParamStore;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update over every parameter in `store`, followed by
/// zeroing the gradients. A non-finite gradient anywhere rejects the whole
/// update and leaves the store untouched.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, cfg: AdamConfig) -> Result<()> {
    for p in store.params() {
        if p.grad.as_slice().iter().any(|g| !g.is_finite()) {
            return Err(LmnError::NonFiniteGradient(p.name.clone()));
        }
    }
    store.advance_step();
    let t = store.step() as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for p in store.params_mut() {
        let values = p.value.as_mut_slice();
        let grads = p.grad.as_mut_slice();
        let m = p.first_moment.as_mut_slice();
        let v = p.second_moment.as_mut_slice();
        for i in 0..values.len() {
            let g = grads[i];
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            grads[i] = T::zero();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::DenseMatrix;

    fn store(vals: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", DenseMatrix::from_vec(vals.len(), 1, vals.to_vec()).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store(&[1.0, -2.0, 3.5]);
        adam_step(&mut s, AdamConfig::default()).unwrap();
        assert_eq!(s.params()[0].value.as_slice(), &[1.0, -2.0, 3.5]);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for (b1, b2) in [(0.9, 0.999), (0.5, 0.7), (0.0, 0.0)] {
            let mut s = store(&[0.0, 0.0, 0.0]);
            s.params_mut()[0]
                .grad
                .as_mut_slice()
                .copy_from_slice(&[0.3, -4.0, 2.0]);
            let cfg = AdamConfig {
                lr: 0.01,
                beta1: b1,
                beta2: b2,
                eps: 1e-8,
            };
            adam_step(&mut s, cfg).unwrap();
            let v = s.params()[0].value.as_slice();
            for (x, sign) in v.iter().zip([-1.0, 1.0, -1.0]) {
                assert!((x - sign * 0.01).abs() <= 1e-9, "{x}");
            }
            assert!(s.params()[0].grad.as_slice().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn two_constant_gradient_steps_match_scalar_reference() {
        let (lr, b1, b2, eps, g) = (0.05, 0.9, 0.999, 1e-8, 0.7);
        // Scalar reference implementation.
        let (mut x, mut m, mut v) = (1.25f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        let mut s = store(&[1.25]);
        let cfg = AdamConfig {
            lr,
            beta1: b1,
            beta2: b2,
            eps,
        };
        for _ in 0..2 {
            s.params_mut()[0].grad.as_mut_slice()[0] = g;
            adam_step(&mut s, cfg).unwrap();
        }
        assert!((s.params()[0].value.as_slice()[0] - x).abs() <= 1e-12);
        assert_eq!(s.step(), 2);
    }

    #[test]
    fn non_finite_gradient_is_rejected_by_name() {
        let mut s = store(&[1.0]);
        s.params_mut()[0].grad.as_mut_slice()[0] = f64::NAN;
        let err = adam_step(&mut s, AdamConfig::default()).unwrap_err();
        assert!(matches!(err, LmnError::NonFiniteGradient(ref n) if n == "p"));
        assert_eq!(s.step(), 0);
        assert_eq!(s.params()[0].value.as_slice(), &[1.0]);
    }
}
