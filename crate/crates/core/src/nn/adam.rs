use super::Parameter;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Adam hyper-parameters. Defaults: lr 0.0008, betas (0.9, 0.999), eps 1e-8.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 0.0008,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.eps > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && (0.0..1.0).contains(&self.beta2)
            && self.beta2 > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("Adam hyper-parameters out of range: {self:?}")))
        }
    }
}

/// One bias-corrected Adam update of `p` from its accumulated gradient.
/// Increments the step count and zeroes the gradient.
pub fn adam_step<T: Scalar>(p: &mut Parameter<T>, hyper: &AdamHyper) -> Result<()> {
    p.grad.ensure_finite("adam_step gradient")?;
    p.step_count += 1;
    let t = p.step_count as i32;
    let (b1, b2) = (T::lit(hyper.beta1), T::lit(hyper.beta2));
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let (lr, eps) = (T::lit(hyper.lr), T::lit(hyper.eps));
    let values = p.value.data_mut().iter_mut();
    let moments = p.adam_m.data_mut().iter_mut().zip(p.adam_v.data_mut().iter_mut());
    for ((theta, (m, v)), g) in values.zip(moments).zip(p.grad.data_mut().iter_mut()) {
        *m = b1 * *m + (T::one() - b1) * *g;
        *v = b2 * *v + (T::one() - b2) * *g * *g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        *g = T::zero();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Parameter::new(Tensor::full(&[1], 0.3f64));
        p.grad.fill(1.0);
        adam_step(&mut p, &AdamHyper::default()).unwrap();
        assert!((p.value.data()[0] - (0.3 - 0.0008)).abs() < 1e-6);
        assert_eq!(p.step_count, 1);
        assert_eq!(p.grad.data()[0], 0.0);
    }

    #[test]
    fn zero_grad_leaves_value() {
        let mut p = Parameter::new(Tensor::from_fn(&[4], |i| i as f64));
        let before = p.value.clone();
        for _ in 0..5 {
            adam_step(&mut p, &AdamHyper::default()).unwrap();
        }
        assert_eq!(p.value, before);
    }

    fn run_quadratic(hyper: AdamHyper, steps: usize) -> f64 {
        let mut p = Parameter::new(Tensor::full(&[1], 1.0f64));
        for _ in 0..steps {
            let th = p.value.data()[0];
            p.grad.data_mut()[0] = 2.0 * th;
            adam_step(&mut p, &hyper).unwrap();
        }
        p.value.data()[0]
    }

    #[test]
    fn quadratic_descends() {
        // each step moves theta by roughly lr while the gradient keeps its sign
        let th = run_quadratic(AdamHyper::default(), 100);
        assert!(th.abs() < 1.0);
        assert!((th - (1.0 - 100.0 * 0.0008)).abs() < 2e-3, "{th}");
        let th = run_quadratic(AdamHyper { lr: 0.01, ..AdamHyper::default() }, 100);
        assert!(th.abs() < 0.9, "{th}");
    }

    #[test]
    fn rejects_non_finite_grad() {
        let mut p = Parameter::new(Tensor::full(&[2], 1.0f64));
        p.grad.data_mut()[1] = f64::NAN;
        assert!(adam_step(&mut p, &AdamHyper::default()).is_err());
        assert_eq!(p.step_count, 0);
    }

    #[test]
    fn deterministic_given_state() {
        let mut a = Parameter::new(Tensor::from_fn(&[3], |i| i as f64 * 0.1));
        a.grad = Tensor::from_fn(&[3], |i| 1.0 - i as f64);
        let mut b = a.clone();
        adam_step(&mut a, &AdamHyper::default()).unwrap();
        adam_step(&mut b, &AdamHyper::default()).unwrap();
        assert_eq!(a, b);
    }
}
