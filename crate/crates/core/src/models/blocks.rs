use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, join, Act, Activation, Conv2d, Dense, Module, Parameter,
};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Two 3×3 convolutions plus a shortcut; the shortcut is a 1×1 convolution
/// when the channel count changes and the identity otherwise.
#[derive(Clone, Debug)]
pub struct ResidualBlock<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub proj: Option<Conv2d<T>>,
    act1: Act<T>,
    act2: Act<T>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new(in_ch: usize, out_ch: usize, act: Activation, rng: &mut Rng) -> Self {
        ResidualBlock {
            conv1: Conv2d::new(in_ch, out_ch, 3, 1, rng),
            conv2: Conv2d::new(out_ch, out_ch, 3, 1, rng),
            proj: (in_ch != out_ch).then(|| Conv2d::new(in_ch, out_ch, 1, 1, rng)),
            act1: Act::new(act),
            act2: Act::new(act),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels()
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = crate::nn::activation(&self.conv1.infer(x)?, self.act1.kind);
        let mut y = crate::nn::activation(&self.conv2.infer(&h)?, self.act2.kind);
        match &self.proj {
            Some(p) => y.add_assign(&p.infer(x)?)?,
            None => y.add_assign(x)?,
        }
        Ok(y)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.act1.forward(&self.conv1.forward(x)?);
        let mut y = self.act2.forward(&self.conv2.forward(&h)?);
        match &mut self.proj {
            Some(p) => y.add_assign(&p.forward(x)?)?,
            None => y.add_assign(x)?,
        }
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.act2.backward(grad)?;
        let g = self.conv2.backward(&g)?;
        let g = self.act1.backward(&g)?;
        let mut gx = self.conv1.backward(&g)?;
        match &mut self.proj {
            Some(p) => gx.add_assign(&p.backward(grad)?)?,
            None => gx.add_assign(grad)?,
        }
        Ok(gx)
    }
}

impl<T: Scalar> Module<T> for ResidualBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter<T>)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        if let Some(p) = &self.proj {
            p.visit_params(&join(prefix, "proj"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter<T>)) {
        self.conv1.visit_params_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_params_mut(&join(prefix, "conv2"), f);
        if let Some(p) = &mut self.proj {
            p.visit_params_mut(&join(prefix, "proj"), f);
        }
    }
}

/// Squeeze-and-excitation channel gate:
/// `x · sigmoid(W2 · relu(W1 · avgpool(x)))`.
#[derive(Clone, Debug)]
pub struct SeBlock<T> {
    pub squeeze: Dense<T>,
    pub excite: Dense<T>,
    act: Act<T>,
    gate_act: Act<T>,
    saved: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> SeBlock<T> {
    pub fn new(channels: usize, reduction: usize, rng: &mut Rng) -> Self {
        let hidden = (channels / reduction.max(1)).max(1);
        SeBlock {
            squeeze: Dense::new(channels, hidden, rng),
            excite: Dense::new(hidden, channels, rng),
            act: Act::new(Activation::Relu),
            gate_act: Act::new(Activation::Sigmoid),
            saved: None,
        }
    }

    /// Per-sample, per-channel gate values in (0, 1).
    pub fn gate(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let pooled = global_avg_pool(x)?;
        let z = crate::nn::activation(&self.squeeze.infer(&pooled)?, self.act.kind);
        Ok(crate::nn::activation(&self.excite.infer(&z)?, Activation::Sigmoid))
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        apply_gate(x, &self.gate(x)?)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let pooled = global_avg_pool(x)?;
        let z = self.act.forward(&self.squeeze.forward(&pooled)?);
        let gate = self.gate_act.forward(&self.excite.forward(&z)?);
        let y = apply_gate(x, &gate)?;
        self.saved = Some((x.clone(), gate));
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (x, gate) = self
            .saved
            .take()
            .ok_or_else(|| Error::Invalid("SeBlock::backward without forward".into()))?;
        let (_, _, h, w) = x.dims4("SeBlock::backward")?;
        let hw = h * w;
        let mut gx = apply_gate(grad, &gate)?;
        let dgate_data = grad
            .data()
            .chunks(hw)
            .zip(x.data().chunks(hw))
            .map(|(g, v)| g.iter().zip(v).map(|(&a, &b)| a * b).sum::<T>())
            .collect();
        let dgate = Tensor::from_vec_unchecked_finite(gate.shape(), dgate_data)?;
        let dz = self.gate_act.backward(&dgate)?;
        let dz = self.excite.backward(&dz)?;
        let dz = self.act.backward(&dz)?;
        let dpooled = self.squeeze.backward(&dz)?;
        gx.add_assign(&global_avg_pool_backward(&dpooled, h, w)?)?;
        Ok(gx)
    }
}

fn apply_gate<T: Scalar>(x: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("se_block")?;
    if gate.shape() != [n, c] {
        return Err(Error::shape("se_block", "gate shape", format!("[{n}, {c}]"), format!("{:?}", gate.shape())));
    }
    let mut y = x.clone();
    for (plane, &g) in y.data_mut().chunks_mut(h * w).zip(gate.data()) {
        plane.iter_mut().for_each(|v| *v *= g);
    }
    Ok(y)
}

impl<T: Scalar> Module<T> for SeBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter<T>)) {
        self.squeeze.visit_params(&join(prefix, "squeeze"), f);
        self.excite.visit_params(&join(prefix, "excite"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter<T>)) {
        self.squeeze.visit_params_mut(&join(prefix, "squeeze"), f);
        self.excite.visit_params_mut(&join(prefix, "excite"), f);
    }
}
