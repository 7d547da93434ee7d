use super::{join, Module, Parameter};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    /// Negative-side slope, 0.2 in both networks.
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

impl Activation {
    pub const LEAKY: Activation = Activation::LeakyRelu(0.2);

    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(T::zero()),
            Activation::LeakyRelu(a) => {
                if x > T::zero() {
                    x
                } else {
                    x * T::lit(a)
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu(a) => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::lit(a)
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    // split by sign so exp never overflows
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn activation<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

pub fn activation_backward<T: Scalar>(
    kind: Activation,
    input: &Tensor<T>,
    output: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    input.ensure_same_shape(grad_out, "activation_backward")?;
    input.ensure_same_shape(output, "activation_backward")?;
    let data = input
        .data()
        .iter()
        .zip(output.data())
        .zip(grad_out.data())
        .map(|((&x, &y), &g)| g * kind.derivative(x, y))
        .collect();
    Tensor::from_vec_unchecked_finite(input.shape(), data)
}

/// Activation layer with a forward cache.
#[derive(Clone, Debug)]
pub struct Act<T> {
    pub kind: Activation,
    saved: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Act<T> {
    pub fn new(kind: Activation) -> Self {
        Act { kind, saved: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = activation(x, self.kind);
        self.saved = Some((x.clone(), y.clone()));
        y
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (x, y) = self
            .saved
            .take()
            .ok_or_else(|| Error::Invalid("activation backward without forward".into()))?;
        activation_backward(self.kind, &x, &y, grad_out)
    }
}

/// `x [n,a] · w [a,b] + bias [b]`.
pub fn dense<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, a) = x.dims2("dense")?;
    let (wa, b) = w.dims2("dense")?;
    if wa != a {
        return Err(Error::shape("dense", "input features (weight dim 0)", a, wa));
    }
    if bias.shape() != [b] {
        return Err(Error::shape("dense", "bias length", b, format!("{:?}", bias.shape())));
    }
    let mut out = Tensor::zeros(&[n, b]);
    for row in out.data_mut().chunks_mut(b.max(1)) {
        row.copy_from_slice(bias.data());
    }
    T::gemm(n, a, b, T::one(), x.data(), a as isize, 1, w.data(), b as isize, 1, T::one(), out.data_mut(), b as isize, 1);
    Ok(out)
}

/// Returns `(dx, dw, dbias)` for [`dense`].
pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, a) = x.dims2("dense_backward")?;
    let (_, b) = w.dims2("dense_backward")?;
    if grad_out.shape() != [n, b] {
        return Err(Error::shape("dense_backward", "grad_out shape", format!("[{n}, {b}]"), format!("{:?}", grad_out.shape())));
    }
    let mut gx = Tensor::zeros(&[n, a]);
    let mut gw = Tensor::zeros(&[a, b]);
    T::gemm(n, b, a, T::one(), grad_out.data(), b as isize, 1, w.data(), 1, b as isize, T::zero(), gx.data_mut(), a as isize, 1);
    T::gemm(a, n, b, T::one(), x.data(), 1, a as isize, grad_out.data(), b as isize, 1, T::zero(), gw.data_mut(), b as isize, 1);
    let mut gb = Tensor::zeros(&[b]);
    for row in grad_out.data().chunks(b.max(1)) {
        gb.data_mut().iter_mut().zip(row).for_each(|(s, &g)| *s += g);
    }
    Ok((gx, gw, gb))
}

#[derive(Clone, Debug)]
pub struct Dense<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    saved: Option<Tensor<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        Dense {
            weight: Parameter::init_uniform(&[inputs, outputs], inputs, rng),
            bias: Parameter::zeros(&[outputs]),
            saved: None,
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        dense(x, &self.weight.value, &self.bias.value)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.saved = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .saved
            .take()
            .ok_or_else(|| Error::Invalid("Dense::backward without forward".into()))?;
        let (gx, gw, gb) = dense_backward(&x, &self.weight.value, grad_out)?;
        self.weight.grad.add_assign(&gw)?;
        self.bias.grad.add_assign(&gb)?;
        Ok(gx)
    }
}

impl<T: Scalar> Module<T> for Dense<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// `[n,c,h,w] -> [n,c]`, mean over the spatial positions.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("global_avg_pool")?;
    let hw = h * w;
    if hw == 0 {
        return Err(Error::Empty("global_avg_pool"));
    }
    let inv = T::one() / T::lit(hw as f64);
    let data = x.data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    Tensor::from_vec_unchecked_finite(&[n, c], data)
}

/// Spreads `grad [n,c]` uniformly as `grad / (h*w)` over `[n,c,h,w]`.
pub fn global_avg_pool_backward<T: Scalar>(grad: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c) = grad.dims2("global_avg_pool_backward")?;
    let inv = T::one() / T::lit((h * w) as f64);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for (plane, &g) in out.data_mut().chunks_mut(h * w).zip(grad.data()) {
        plane.fill(g * inv);
    }
    Ok(out)
}

/// Nearest-neighbour upsampling by an integer `factor`.
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("upsample_nearest")?;
    if factor == 0 {
        return Err(Error::Invalid("upsample_nearest: factor must be positive".into()));
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(oh * ow)) {
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / factor) * w + xx / factor];
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample_nearest`]: sums each `factor×factor` block.
pub fn upsample_nearest_backward<T: Scalar>(grad: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = grad.dims4("upsample_nearest_backward")?;
    if factor == 0 || oh % factor != 0 || ow % factor != 0 {
        return Err(Error::shape("upsample_nearest_backward", "spatial axes", format!("multiples of {factor}"), format!("{oh}x{ow}")));
    }
    let (h, w) = (oh / factor, ow / factor);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for (src, dst) in grad.data().chunks(oh * ow).zip(out.data_mut().chunks_mut(h * w)) {
        for y in 0..oh {
            for xx in 0..ow {
                dst[(y / factor) * w + xx / factor] += src[y * ow + xx];
            }
        }
    }
    Ok(out)
}

/// Mean over non-overlapping `factor×factor` blocks.
pub fn avg_pool2d<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let summed = upsample_nearest_backward(x, factor)?;
    Ok(summed.scale(T::one() / T::lit((factor * factor) as f64)))
}

pub fn avg_pool2d_backward<T: Scalar>(grad: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let up = upsample_nearest(grad, factor)?;
    Ok(up.scale(T::one() / T::lit((factor * factor) as f64)))
}

/// Concatenates `[n,ca,h,w]` and `[n,cb,h,w]` along channels.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4("concat_channels")?;
    let (nb, cb, hb, wb) = b.dims4("concat_channels")?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape("concat_channels", "batch/spatial axes", format!("{n}x{h}x{w}"), format!("{nb}x{hb}x{wb}")));
    }
    let (la, lb) = (ca * h * w, cb * h * w);
    let mut data = Vec::with_capacity(n * (la + lb));
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * la..(i + 1) * la]);
        data.extend_from_slice(&b.data()[i * lb..(i + 1) * lb]);
    }
    Tensor::from_vec_unchecked_finite(&[n, ca + cb, h, w], data)
}

/// Inverse of [`concat_channels`]: the first `ca` channels and the rest.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.dims4("split_channels")?;
    if ca > c {
        return Err(Error::shape("split_channels", "channel axis", format!("<= {c}"), ca));
    }
    let cb = c - ca;
    let (la, lb) = (ca * h * w, cb * h * w);
    let mut a = Vec::with_capacity(n * la);
    let mut b = Vec::with_capacity(n * lb);
    for item in x.data().chunks(la + lb) {
        a.extend_from_slice(&item[..la]);
        b.extend_from_slice(&item[la..]);
    }
    Ok((
        Tensor::from_vec_unchecked_finite(&[n, ca, h, w], a)?,
        Tensor::from_vec_unchecked_finite(&[n, cb, h, w], b)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{finite_diff_grad, relative_error};
    use crate::rng::substream;
    use rand::Rng as _;

    fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn activation_point_values() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(activation(&x, Activation::LEAKY).data(), &[-0.2, 0.0, 2.0]);
        assert_eq!(activation(&x, Activation::Relu).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(activation(&x, Activation::Sigmoid).data()[1], 0.5);
        let big = Tensor::<f64>::from_vec(&[2], vec![-800.0, 800.0]).unwrap();
        let s = activation(&big, Activation::Sigmoid);
        assert!(s.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sigmoid_stays_in_open_interval() {
        let x = Tensor::from_fn(&[41], |i| i as f64 - 20.0);
        assert!(activation(&x, Activation::Sigmoid).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn tanh_grad_at_zero_is_one() {
        let x = Tensor::<f64>::zeros(&[1]);
        let y = activation(&x, Activation::Tanh);
        let g = activation_backward(Activation::Tanh, &x, &y, &Tensor::full(&[1], 1.0)).unwrap();
        let fd = finite_diff_grad(|t| Ok(activation(t, Activation::Tanh).sum()), &x, 1e-4).unwrap();
        assert_eq!(g.data()[0], 1.0);
        assert!((fd.data()[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn activation_grads_match_finite_differences() {
        let mut rng = substream(10, "t");
        // keep samples away from the kink at 0
        let x = Tensor::from_fn(&[64], |_| {
            let v: f64 = rng.gen_range(0.05..2.0);
            if rng.gen_bool(0.5) { v } else { -v }
        });
        let r = rand_tensor(&[64], &mut rng);
        for kind in [Activation::Relu, Activation::LEAKY, Activation::Sigmoid, Activation::Tanh] {
            let y = activation(&x, kind);
            let g = activation_backward(kind, &x, &y, &r).unwrap();
            let fd = finite_diff_grad(|t| Ok(dot(&activation(t, kind), &r)), &x, 1e-4).unwrap();
            assert!(relative_error(&g, &fd) < 1e-5, "{kind:?}");
        }
    }

    #[test]
    fn dense_hand_values() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let eye = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(dense(&x, &eye, &Tensor::zeros(&[2])).unwrap(), x);
        let b = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(dense(&x, &eye, &b).unwrap().data(), &[4.0, 6.0]);
        assert!(dense(&x, &Tensor::zeros(&[3, 2]), &b).is_err());
    }

    #[test]
    fn dense_grads_match_finite_differences() {
        let mut rng = substream(11, "t");
        let x = rand_tensor(&[3, 5], &mut rng);
        let w = rand_tensor(&[5, 4], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        let r = rand_tensor(&[3, 4], &mut rng);
        let (gx, gw, gb) = dense_backward(&x, &w, &r).unwrap();
        let fx = finite_diff_grad(|t| Ok(dot(&dense(t, &w, &b)?, &r)), &x, 1e-4).unwrap();
        let fw = finite_diff_grad(|t| Ok(dot(&dense(&x, t, &b)?, &r)), &w, 1e-4).unwrap();
        let fb = finite_diff_grad(|t| Ok(dot(&dense(&x, &w, t)?, &r)), &b, 1e-4).unwrap();
        assert!(relative_error(&gx, &fx) < 1e-5);
        assert!(relative_error(&gw, &fw) < 1e-5);
        assert!(relative_error(&gb, &fb) < 1e-5);
    }

    #[test]
    fn global_pool_values_and_backward() {
        let x = Tensor::full(&[1, 2, 3, 3], 1.75);
        assert!(global_avg_pool(&x).unwrap().data().iter().all(|&v| v == 1.75));
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
        let g = global_avg_pool_backward(&Tensor::from_vec(&[1, 1], vec![2.0]).unwrap(), 2, 2).unwrap();
        assert_eq!(g.data(), &[0.5; 4]);

        let mut rng = substream(12, "t");
        let x = rand_tensor(&[2, 3, 4, 3], &mut rng);
        let r = rand_tensor(&[2, 3], &mut rng);
        let g = global_avg_pool_backward(&r, 4, 3).unwrap();
        let fd = finite_diff_grad(|t| Ok(dot(&global_avg_pool(t)?, &r)), &x, 1e-4).unwrap();
        assert!(relative_error(&g, &fd) < 1e-5);
    }

    #[test]
    fn upsample_values_roundtrip_and_grad() {
        let x = Tensor::full(&[1, 1, 1, 1], 5.0);
        let up = upsample_nearest(&x, 2).unwrap();
        assert_eq!(up.shape(), &[1, 1, 2, 2]);
        assert!(up.data().iter().all(|&v| v == 5.0));

        let mut rng = substream(13, "t");
        let x = rand_tensor(&[2, 3, 4, 5], &mut rng);
        for f in [1, 2, 3] {
            let back = avg_pool2d(&upsample_nearest(&x, f).unwrap(), f).unwrap();
            assert!(back.max_abs_diff(&x).unwrap() < 1e-15);
        }
        let r = rand_tensor(&[2, 3, 8, 10], &mut rng);
        let g = upsample_nearest_backward(&r, 2).unwrap();
        let fd = finite_diff_grad(|t| Ok(dot(&upsample_nearest(t, 2)?, &r)), &x, 1e-4).unwrap();
        assert!(relative_error(&g, &fd) < 1e-5);
    }

    #[test]
    fn avg_pool_grad_matches_finite_differences() {
        let mut rng = substream(14, "t");
        let x = rand_tensor(&[1, 2, 4, 6], &mut rng);
        let r = rand_tensor(&[1, 2, 2, 3], &mut rng);
        let g = avg_pool2d_backward(&r, 2).unwrap();
        let fd = finite_diff_grad(|t| Ok(dot(&avg_pool2d(t, 2)?, &r)), &x, 1e-4).unwrap();
        assert!(relative_error(&g, &fd) < 1e-5);
    }

    #[test]
    fn concat_split_roundtrip() {
        let mut rng = substream(15, "t");
        let a = rand_tensor(&[2, 3, 2, 2], &mut rng);
        let b = rand_tensor(&[2, 1, 2, 2], &mut rng);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 4, 2, 2]);
        let (a2, b2) = split_channels(&c, 3).unwrap();
        assert_eq!((a2, b2), (a, b));
    }
}
