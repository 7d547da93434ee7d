//! Minimal layer kernel: forward passes, hand-derived backward passes, Adam,
//! and a central-difference gradient oracle.
//!
//! Layers cache what their backward pass needs during `forward`; `infer`
//! computes the same output without touching the cache. Gradients
//! accumulate into [`Parameter::grad`] until the optimizer consumes them.

mod adam;
mod conv;
pub mod gradcheck;
mod layers;

pub use adam::{adam_step, AdamHyper};
pub use conv::{conv2d, conv2d_backward, Conv2d, ConvCtx, ConvGrads};
pub use layers::{
    activation, activation_backward, avg_pool2d, avg_pool2d_backward, concat_channels, dense,
    dense_backward, global_avg_pool, global_avg_pool_backward, split_channels, upsample_nearest,
    upsample_nearest_backward, Act, Activation, Dense,
};

use rand::Rng as _;

use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A trainable tensor with its gradient buffer and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
    pub step_count: u64,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Parameter {
            grad: zeros.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            value,
            step_count: 0,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(Tensor::zeros(shape))
    }

    /// Centered uniform init with half-width `sqrt(2 / fan_in)`.
    pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Self {
        let bound = (2.0 / fan_in.max(1) as f64).sqrt();
        Self::new(Tensor::from_fn(shape, |_| {
            T::lit(rng.gen_range(-bound..bound))
        }))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything that owns named parameters.
pub trait Module<T: Scalar> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter<T>));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter<T>));

    fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params("", &mut |name, _| names.push(name.to_string()));
        names
    }

    /// One Adam update on every parameter; grads are zeroed afterwards.
    fn adam_step_all(&mut self, hyper: &AdamHyper) -> crate::Result<()> {
        let mut res = Ok(());
        self.visit_params_mut("", &mut |name, p| {
            if res.is_ok() {
                res = adam_step(p, hyper).map_err(|e| match e {
                    crate::Error::NonFinite(ctx) => crate::Error::NonFinite(format!("{ctx} ({name})")),
                    other => other,
                });
            }
        });
        res
    }
}
