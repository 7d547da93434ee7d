//! Finite-support oracle for the GAN value function and its optimum.
//!
//! Everything is in nats. Terms of the form `0 * log(0)` count as zero.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

const SUM_TOL: f64 = 1e-12;

/// A probability vector over a finite support.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution {
    probs: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("distribution"));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::Invalid(format!("probability {p} is not a finite non-negative number")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::Invalid(format!("probabilities sum to {total}, expected 1")));
        }
        Ok(Self { probs })
    }

    /// Normalizes arbitrary non-negative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Invalid("weights must have a positive finite sum".into()));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    /// Point mass at `index`.
    pub fn delta(len: usize, index: usize) -> Result<Self> {
        if index >= len {
            return Err(Error::Invalid(format!("delta index {index} outside support of size {len}")));
        }
        let mut probs = vec![0.0; len];
        probs[index] = 1.0;
        Self::new(probs)
    }

    pub fn uniform(len: usize) -> Result<Self> {
        Self::from_weights(&vec![1.0; len])
    }

    /// Random histogram; roughly a third of the bins are left empty.
    pub fn random(len: usize, rng: &mut Rng) -> Result<Self> {
        let mut w: Vec<f64> = (0..len)
            .map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.0..1.0) })
            .collect();
        if w.iter().all(|&v| v == 0.0) {
            w[rng.gen_range(0..len)] = 1.0;
        }
        Self::from_weights(&w)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

fn aligned(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::shape("gan-theory", "support", p.len(), q.len()));
    }
    Ok(())
}

/// `w * ln(x)` with the zero-weight convention.
fn xlog(w: f64, x: f64) -> f64 {
    if w == 0.0 {
        0.0
    } else {
        w * x.ln()
    }
}

/// D*(x) = p_data / (p_data + p_g), and 0.5 where both vanish.
pub fn optimal_discriminator(p_data: &DiscreteDistribution, p_g: &DiscreteDistribution) -> Result<Vec<f64>> {
    aligned(p_data, p_g)?;
    Ok(p_data
        .probs
        .iter()
        .zip(&p_g.probs)
        .map(|(&p, &q)| if p + q == 0.0 { 0.5 } else { p / (p + q) })
        .collect())
}

pub fn kl_divergence(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    aligned(p, q)?;
    let mut total = 0.0;
    for (&a, &b) in p.probs.iter().zip(&q.probs) {
        if a > 0.0 && b == 0.0 {
            return Ok(f64::INFINITY);
        }
        total += xlog(a, a / b.max(f64::MIN_POSITIVE));
    }
    Ok(total)
}

/// Jensen-Shannon divergence in nats.
pub fn js_divergence(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    aligned(p, q)?;
    let mut total = 0.0;
    for (&a, &b) in p.probs.iter().zip(&q.probs) {
        let m = 0.5 * (a + b);
        // Accumulate symmetric pairs so that swapping p and q gives identical bits.
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        total += 0.5 * (xlog(lo, lo / m) + xlog(hi, hi / m));
    }
    Ok(total.clamp(0.0, std::f64::consts::LN_2))
}

/// Sum over the support of p_data ln D + p_g ln(1 - D).
pub fn value_function(p_data: &DiscreteDistribution, p_g: &DiscreteDistribution, d: &[f64]) -> Result<f64> {
    aligned(p_data, p_g)?;
    if d.len() != p_data.len() {
        return Err(Error::shape("value_function", "support", p_data.len(), d.len()));
    }
    if let Some(v) = d.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Invalid(format!("discriminator output {v} outside [0, 1]")));
    }
    Ok(p_data
        .probs
        .iter()
        .zip(&p_g.probs)
        .zip(d)
        .map(|((&p, &q), &dv)| xlog(p, dv) + xlog(q, 1.0 - dv))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquilibriumCheck {
    /// V(D*, G).
    pub value: f64,
    /// -ln 4 + 2 JSD(p_data, p_g).
    pub predicted: f64,
    pub residual: f64,
}

pub fn check_equilibrium(p_data: &DiscreteDistribution, p_g: &DiscreteDistribution) -> Result<EquilibriumCheck> {
    let d = optimal_discriminator(p_data, p_g)?;
    let value = value_function(p_data, p_g, &d)?;
    let predicted = -(4.0f64).ln() + 2.0 * js_divergence(p_data, p_g)?;
    Ok(EquilibriumCheck { value, predicted, residual: (value - predicted).abs() })
}
