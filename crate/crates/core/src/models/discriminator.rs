//! Stride-2 convolutional discriminator with an optional minibatch
//! discrimination layer between the last convolution and the classifier.

use super::mbd::MinibatchDiscrimination;
use crate::error::{Error, Result};
use crate::nn::{join, Act, Activation, Conv2d, Dense, Module, Parameter};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub n_conv: usize,
    pub base_channels: usize,
    /// `B`, number of minibatch-discrimination kernels.
    pub mbd_kernels: usize,
    /// `C`, length of each kernel row.
    pub mbd_dim: usize,
    /// Feed the source bands alongside the candidate target bands.
    pub condition_on_source: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            n_conv: 7,
            base_channels: 16,
            mbd_kernels: 16,
            mbd_dim: 8,
            condition_on_source: true,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_conv == 0 || self.base_channels == 0 || self.mbd_kernels == 0 || self.mbd_dim == 0 {
            return Err(Error::Config("discriminator sizes must all be positive".into()));
        }
        Ok(())
    }

    /// Channels after conv `i`; doubles per layer and saturates at `8·base`.
    pub fn channels_at(&self, i: usize) -> usize {
        self.base_channels << i.min(3)
    }

    /// Input channels for a network whose samples have `io_channels`.
    pub fn input_channels(&self, io_channels: usize) -> usize {
        if self.condition_on_source {
            2 * io_channels
        } else {
            io_channels
        }
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    cfg: DiscriminatorConfig,
    in_channels: usize,
    spatial: usize,
    convs: Vec<Conv2d<T>>,
    acts: Vec<Act<T>>,
    mbd: Option<MinibatchDiscrimination<T>>,
    fc: Dense<T>,
    out_act: Act<T>,
    feat_shape: Vec<usize>,
}

impl<T: Scalar> Discriminator<T> {
    /// `spatial` is the side length of the (square) input maps.
    pub fn new(cfg: &DiscriminatorConfig, in_channels: usize, spatial: usize, use_mbd: bool, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        if spatial == 0 || in_channels == 0 {
            return Err(Error::Config("discriminator input must be non-empty".into()));
        }
        let mut convs = Vec::with_capacity(cfg.n_conv);
        let mut c = in_channels;
        let mut s = spatial;
        for i in 0..cfg.n_conv {
            let out = cfg.channels_at(i);
            convs.push(Conv2d::new(c, out, 3, 2, rng));
            c = out;
            s = (s - 1) / 2 + 1;
        }
        let features = c * s * s;
        let mbd = use_mbd.then(|| MinibatchDiscrimination::new(features, cfg.mbd_kernels, cfg.mbd_dim, rng));
        let fc_in = features + if use_mbd { cfg.mbd_kernels } else { 0 };
        Ok(Discriminator {
            cfg: cfg.clone(),
            in_channels,
            spatial,
            acts: (0..cfg.n_conv).map(|_| Act::new(Activation::LEAKY)).collect(),
            convs,
            mbd,
            fc: Dense::new(fc_in, 1, rng),
            out_act: Act::new(Activation::Sigmoid),
            feat_shape: vec![c, s, s],
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn has_mbd(&self) -> bool {
        self.mbd.is_some()
    }

    /// Flattened feature width `A` seen by the minibatch layer.
    pub fn feature_len(&self) -> usize {
        self.feat_shape.iter().product()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let (n, c, h, w) = x.dims4("discriminator_forward")?;
        if c != self.in_channels {
            return Err(Error::shape("discriminator_forward", "channel axis", self.in_channels, c));
        }
        if h != self.spatial || w != self.spatial {
            return Err(Error::shape("discriminator_forward", "spatial axes", format!("{0}x{0}", self.spatial), format!("{h}x{w}")));
        }
        if n == 0 {
            return Err(Error::Empty("discriminator_forward"));
        }
        Ok(n)
    }

    /// Probabilities `[n]` without caching.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.check_input(x)?;
        let mut h = x.clone();
        for conv in &self.convs {
            h = crate::nn::activation(&conv.infer(&h)?, Activation::LEAKY);
        }
        let f = h.reshape(&[n, self.feature_len()])?;
        let f = match &self.mbd {
            Some(m) => concat_cols(&f, &m.infer(&f)?)?,
            None => f,
        };
        let p = crate::nn::activation(&self.fc.infer(&f)?, Activation::Sigmoid);
        p.reshape(&[n])
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.check_input(x)?;
        let mut h = x.clone();
        for (conv, act) in self.convs.iter_mut().zip(&mut self.acts) {
            h = act.forward(&conv.forward(&h)?);
        }
        let f = h.reshape(&[n, self.feature_len()])?;
        let f = match &mut self.mbd {
            Some(m) => {
                let o = m.forward(&f)?;
                concat_cols(&f, &o)?
            }
            None => f,
        };
        let p = self.out_act.forward(&self.fc.forward(&f)?);
        p.reshape(&[n])
    }

    /// Takes `dL/dp` for the `[n]` probabilities; returns `dL/dx`.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let n = grad.len();
        let g = self.out_act.backward(&grad.clone().reshape(&[n, 1])?)?;
        let g = self.fc.backward(&g)?;
        let a = self.feature_len();
        let mut gf = match &mut self.mbd {
            Some(m) => {
                let (mut gf, go) = split_cols(&g, a)?;
                gf.add_assign(&m.backward(&go)?)?;
                gf
            }
            None => g,
        };
        let mut shape = vec![n];
        shape.extend_from_slice(&self.feat_shape);
        gf = gf.reshape(&shape)?;
        for (conv, act) in self.convs.iter_mut().zip(&mut self.acts).rev() {
            gf = conv.backward(&act.backward(&gf)?)?;
        }
        Ok(gf)
    }
}

fn concat_cols<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca) = a.dims2("concat_cols")?;
    let (nb, cb) = b.dims2("concat_cols")?;
    if n != nb {
        return Err(Error::shape("concat_cols", "batch axis", n, nb));
    }
    let mut data = Vec::with_capacity(n * (ca + cb));
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * ca..(i + 1) * ca]);
        data.extend_from_slice(&b.data()[i * cb..(i + 1) * cb]);
    }
    Tensor::from_vec_unchecked_finite(&[n, ca + cb], data)
}

fn split_cols<T: Scalar>(x: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c) = x.dims2("split_cols")?;
    let mut a = Vec::with_capacity(n * ca);
    let mut b = Vec::with_capacity(n * (c - ca));
    for row in x.data().chunks(c) {
        a.extend_from_slice(&row[..ca]);
        b.extend_from_slice(&row[ca..]);
    }
    Ok((
        Tensor::from_vec_unchecked_finite(&[n, ca], a)?,
        Tensor::from_vec_unchecked_finite(&[n, c - ca], b)?,
    ))
}

impl<T: Scalar> Module<T> for Discriminator<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter<T>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit_params(&join(prefix, &format!("conv{i}")), f);
        }
        if let Some(m) = &self.mbd {
            m.visit_params(&join(prefix, "mbd"), f);
        }
        self.fc.visit_params(&join(prefix, "fc"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter<T>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_params_mut(&join(prefix, &format!("conv{i}")), f);
        }
        if let Some(m) = &mut self.mbd {
            m.visit_params_mut(&join(prefix, "mbd"), f);
        }
        self.fc.visit_params_mut(&join(prefix, "fc"), f);
    }
}
