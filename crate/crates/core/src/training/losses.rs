//! Adversarial and guidance losses. Each returns its value together with
//! the gradient with respect to its inputs.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PROB_CLAMP: f64 = 1e-7;

fn clamp_prob(p: f64) -> (f64, bool) {
    if p < PROB_CLAMP {
        (PROB_CLAMP, false)
    } else if p > 1.0 - PROB_CLAMP {
        (1.0 - PROB_CLAMP, false)
    } else {
        (p, true)
    }
}

/// `-0.5 * mean(ln p)` and its gradient. Clamped entries get zero gradient.
fn neg_half_mean_log(probs: &[f64]) -> (f64, Vec<f64>) {
    let n = probs.len() as f64;
    let mut value = 0.0;
    let grad = probs
        .iter()
        .map(|&p| {
            let (c, live) = clamp_prob(p);
            value -= c.ln();
            if live {
                -0.5 / (n * c)
            } else {
                0.0
            }
        })
        .collect();
    (0.5 * value / n, grad)
}

/// `-0.5 * mean(ln(1 - p))` and its gradient.
fn neg_half_mean_log1m(probs: &[f64]) -> (f64, Vec<f64>) {
    let flipped: Vec<f64> = probs.iter().map(|p| 1.0 - p).collect();
    let (v, g) = neg_half_mean_log(&flipped);
    (v, g.into_iter().map(|x| -x).collect())
}

fn check_probs(p: &[f64], what: &'static str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Empty(what));
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.into()));
    }
    Ok(())
}

/// Value of the discriminator cost with gradients for both batches.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscLoss {
    pub value: f64,
    pub grad_real: Vec<f64>,
    pub grad_fake: Vec<f64>,
}

/// `-0.5 mean ln D(real) - 0.5 mean ln(1 - D(fake))`.
pub fn discriminator_loss(d_real: &[f64], d_fake: &[f64]) -> Result<DiscLoss> {
    let (vr, grad_real) = real_term(d_real)?;
    let (vf, grad_fake) = fake_term(d_fake)?;
    Ok(DiscLoss { value: vr + vf, grad_real, grad_fake })
}

/// Real-batch half of [`discriminator_loss`].
pub(crate) fn real_term(d_real: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_probs(d_real, "discriminator_loss real batch")?;
    Ok(neg_half_mean_log(d_real))
}

/// Fake-batch half of [`discriminator_loss`].
pub(crate) fn fake_term(d_fake: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_probs(d_fake, "discriminator_loss fake batch")?;
    Ok(neg_half_mean_log1m(d_fake))
}

/// Non-saturating generator cost `-0.5 mean ln D(fake)`.
pub fn generator_adv_loss(d_fake: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_probs(d_fake, "generator_adv_loss")?;
    Ok(neg_half_mean_log(d_fake))
}

/// Zero-sum generator cost: exactly the negated discriminator cost. The
/// gradient is taken with respect to the fake batch only.
pub fn generator_minimax_loss(d_real: &[f64], d_fake: &[f64]) -> Result<(f64, Vec<f64>)> {
    let d = discriminator_loss(d_real, d_fake)?;
    Ok((-d.value, d.grad_fake.into_iter().map(|g| -g).collect()))
}

/// Mean absolute difference and its (sub)gradient with respect to `pred`.
pub fn l1_guidance<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    pred.ensure_same_shape(target, "l1_guidance")?;
    if pred.is_empty() {
        return Err(Error::Empty("l1_guidance"));
    }
    let n = pred.len() as f64;
    let mut total = 0.0;
    let step = T::lit(1.0 / n);
    let grad = pred.zip_map(target, |p, t| {
        let d = p - t;
        if d > T::zero() {
            step
        } else if d < T::zero() {
            -step
        } else {
            T::zero()
        }
    })?;
    for (p, t) in pred.data().iter().zip(target.data()) {
        total += (*p - *t).abs().as_f64();
    }
    Ok((total / n, grad))
}

pub fn generator_total_loss(adv: f64, l1: f64, lambda: f64) -> f64 {
    adv + lambda * l1
}
