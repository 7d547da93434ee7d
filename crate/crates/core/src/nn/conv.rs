use super::{join, Module, Parameter};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Saved operands of a [`conv2d`] call.
#[derive(Clone, Debug)]
pub struct ConvCtx<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        const OP: &str = "conv2d";
        let &[n, c, h, w] = input else {
            return Err(Error::shape(OP, "input rank", 4, input.len()));
        };
        let &[o, wc, kh, kw] = weight else {
            return Err(Error::shape(OP, "weight rank", 4, weight.len()));
        };
        if wc != c {
            return Err(Error::shape(OP, "channel axis (weight dim 1)", c, wc));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(OP, "kernel size", "odd", format!("{kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::Invalid("conv2d: stride must be positive".into()));
        }
        if h + 2 * pad < kh {
            return Err(Error::shape(OP, "height axis", format!(">= {}", kh - 2 * pad.min(kh / 2)), h));
        }
        if w + 2 * pad < kw {
            return Err(Error::shape(OP, "width axis", format!(">= {}", kw - 2 * pad.min(kw / 2)), w));
        }
        Ok(Geometry {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_px(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unfolds one sample `[c,h,w]` into `[c*kh*kw, oh*ow]`.
    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let px = self.out_px();
        let mut r = 0;
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = &mut col[r * px..(r + 1) * px];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let dst = &mut row[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                    r += 1;
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters-adds columns back into `[c,h,w]`.
    fn col2im<T: Scalar>(&self, col: &[T], x: &mut [T]) {
        let px = self.out_px();
        let mut r = 0;
        for ci in 0..self.c {
            let plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = &col[r * px..(r + 1) * px];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += row[oy * self.ow + ox];
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// 2-D cross-correlation with zero padding.
///
/// `input [n,c,h,w]`, `weight [o,c,kh,kw]`, `bias [o]` gives
/// `[n,o,(h+2p-kh)/s+1,(w+2p-kw)/s+1]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = Geometry::new(input.shape(), weight.shape(), stride, pad)?;
    if bias.shape() != [g.o] {
        return Err(Error::shape("conv2d", "bias length", g.o, format!("{:?}", bias.shape())));
    }
    let (patch, px) = (g.patch(), g.out_px());
    let mut out = Tensor::zeros(&[g.n, g.o, g.oh, g.ow]);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); patch * px] };
    let in_len = g.c * g.h * g.w;
    let out_len = g.o * px;
    for ni in 0..g.n {
        let x = &input.data()[ni * in_len..(ni + 1) * in_len];
        let y = &mut out.data_mut()[ni * out_len..(ni + 1) * out_len];
        for (oi, chunk) in y.chunks_mut(px).enumerate() {
            chunk.fill(bias.data()[oi]);
        }
        let col_ref: &[T] = if g.is_pointwise() {
            x
        } else {
            g.im2col(x, &mut col);
            &col
        };
        T::gemm(
            g.o, patch, px, T::one(),
            weight.data(), patch as isize, 1,
            col_ref, px as isize, 1,
            T::one(), y, px as isize, 1,
        );
    }
    Ok(out)
}

/// Gradients of a scalar loss through [`conv2d`], given `dL/dout`.
pub fn conv2d_backward<T: Scalar>(ctx: Option<&ConvCtx<T>>, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
    let ctx = ctx.ok_or_else(|| Error::Invalid("conv2d_backward: no saved forward context".into()))?;
    let g = Geometry::new(ctx.input.shape(), ctx.weight.shape(), ctx.stride, ctx.pad)?;
    let mut grads = ConvGrads {
        input: Tensor::zeros(ctx.input.shape()),
        weight: Tensor::zeros(ctx.weight.shape()),
        bias: Tensor::zeros(&[g.o]),
    };
    backward_into(
        &g,
        &ctx.input,
        &ctx.weight,
        grad_out,
        Some(&mut grads.input),
        &mut grads.weight,
        &mut grads.bias,
    )?;
    Ok(grads)
}

fn backward_into<T: Scalar>(
    g: &Geometry,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    mut grad_in: Option<&mut Tensor<T>>,
    grad_w: &mut Tensor<T>,
    grad_b: &mut Tensor<T>,
) -> Result<()> {
    let expect = [g.n, g.o, g.oh, g.ow];
    if grad_out.shape() != expect {
        return Err(Error::shape(
            "conv2d_backward",
            "grad_out shape",
            format!("{expect:?}"),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let (patch, px) = (g.patch(), g.out_px());
    let in_len = g.c * g.h * g.w;
    let out_len = g.o * px;
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { patch * px }];
    let mut gcol = vec![T::zero(); if g.is_pointwise() { 0 } else { patch * px }];
    for ni in 0..g.n {
        let x = &input.data()[ni * in_len..(ni + 1) * in_len];
        let gy = &grad_out.data()[ni * out_len..(ni + 1) * out_len];
        for (oi, chunk) in gy.chunks(px).enumerate() {
            grad_b.data_mut()[oi] += chunk.iter().copied().sum::<T>();
        }
        let col_ref: &[T] = if g.is_pointwise() {
            x
        } else {
            g.im2col(x, &mut col);
            &col
        };
        // dW[o, r] += sum_p gy[o, p] * col[r, p]
        T::gemm(
            g.o, px, patch, T::one(),
            gy, px as isize, 1,
            col_ref, 1, px as isize,
            T::one(), grad_w.data_mut(), patch as isize, 1,
        );
        if let Some(gi) = grad_in.as_deref_mut() {
            let gx = &mut gi.data_mut()[ni * in_len..(ni + 1) * in_len];
            if g.is_pointwise() {
                T::gemm(
                    patch, g.o, px, T::one(),
                    weight.data(), 1, patch as isize,
                    gy, px as isize, 1,
                    T::one(), gx, px as isize, 1,
                );
            } else {
                T::gemm(
                    patch, g.o, px, T::one(),
                    weight.data(), 1, patch as isize,
                    gy, px as isize, 1,
                    T::zero(), &mut gcol, px as isize, 1,
                );
                g.col2im(&gcol, gx);
            }
        }
    }
    Ok(())
}

/// Convolution layer owning its weight and bias.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    pub stride: usize,
    pub pad: usize,
    saved: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// Square `k×k` kernel with "same" padding `(k-1)/2`.
    pub fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize, rng: &mut Rng) -> Self {
        Conv2d {
            weight: Parameter::init_uniform(&[out_ch, in_ch, k, k], in_ch * k * k, rng),
            bias: Parameter::zeros(&[out_ch]),
            stride,
            pad: (k - 1) / 2,
            saved: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight.value, &self.bias.value, self.stride, self.pad)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.saved = Some(x.clone());
        Ok(y)
    }

    /// Accumulates parameter grads; returns `dL/dx`.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut gi = self.backward_impl(grad_out, true)?;
        Ok(gi.take().expect("input grad requested"))
    }

    /// Parameter grads only; for a first layer whose input needs no gradient.
    pub fn backward_params_only(&mut self, grad_out: &Tensor<T>) -> Result<()> {
        self.backward_impl(grad_out, false).map(|_| ())
    }

    fn backward_impl(&mut self, grad_out: &Tensor<T>, want_input: bool) -> Result<Option<Tensor<T>>> {
        let input = self
            .saved
            .take()
            .ok_or_else(|| Error::Invalid("Conv2d::backward called without a cached forward".into()))?;
        let g = Geometry::new(input.shape(), self.weight.value.shape(), self.stride, self.pad)?;
        let mut gi = want_input.then(|| Tensor::zeros(input.shape()));
        backward_into(
            &g,
            &input,
            &self.weight.value,
            grad_out,
            gi.as_mut(),
            &mut self.weight.grad,
            &mut self.bias.grad,
        )?;
        Ok(gi)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
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

    /// Direct six-loop cross-correlation, independent of im2col/gemm.
    fn conv_naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
        let (n, c, h, wd) = x.dims4("t").unwrap();
        let (o, _, kh, kw) = w.dims4("t").unwrap();
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (wd + 2 * p - kw) / s + 1;
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        for ni in 0..n {
            for oi in 0..o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b.data()[oi];
                        for ci in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (y * s + ki) as isize - p as isize;
                                    let ix = (xx * s + kj) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((oi * c + ci) * kh + ki) * kw + kj];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((ni * o + oi) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_returns_input() {
        let x = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 + 1.0);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let b = Tensor::zeros(&[1]);
        assert_eq!(conv2d(&x, &w, &b, 1, 0).unwrap(), x);
    }

    #[test]
    fn all_ones_kernel_sums_to_45() {
        let x = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 + 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 45.0);
    }

    #[test]
    fn zero_input_gives_bias_map() {
        let mut rng = substream(1, "t");
        let x = Tensor::zeros(&[2, 3, 5, 5]);
        let w = rand_tensor(&[2, 3, 3, 3], &mut rng);
        let b = Tensor::from_vec(&[2], vec![0.25, -1.5]).unwrap();
        let y = conv2d(&x, &w, &b, 1, 1).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, if (i / 25) % 2 == 0 { 0.25 } else { -1.5 });
        }
    }

    #[test]
    fn matches_naive_loop_for_strides_and_pads() {
        let mut rng = substream(2, "t");
        for &(s, p, k) in &[(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 2, 5), (3, 1, 3)] {
            let x = rand_tensor(&[2, 3, 7, 6], &mut rng);
            let w = rand_tensor(&[4, 3, k, k], &mut rng);
            let b = rand_tensor(&[4], &mut rng);
            let fast = conv2d(&x, &w, &b, s, p).unwrap();
            let slow = conv_naive(&x, &w, &b, s, p);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12, "s={s} p={p} k={k}");
        }
    }

    #[test]
    fn same_padding_preserves_spatial_shape() {
        let mut rng = substream(3, "t");
        for k in [1, 3, 5] {
            let x = rand_tensor(&[1, 2, 9, 4], &mut rng);
            let w = rand_tensor(&[3, 2, k, k], &mut rng);
            let y = conv2d(&x, &w, &Tensor::zeros(&[3]), 1, (k - 1) / 2).unwrap();
            assert_eq!(y.shape(), &[1, 3, 9, 4]);
        }
    }

    #[test]
    fn shape_errors_name_the_axis() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 1).unwrap_err().to_string();
        assert!(err.contains("channel"), "{err}");
        let w = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 1).unwrap_err().to_string().contains("kernel"));
        let w = Tensor::<f64>::zeros(&[1, 2, 5, 5]);
        let small = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(conv2d(&small, &w, &Tensor::zeros(&[1]), 1, 0).unwrap_err().to_string().contains("height"));
    }

    #[test]
    fn backward_without_context_errors() {
        let g = Tensor::<f64>::zeros(&[1, 1, 1, 1]);
        assert!(conv2d_backward(None, &g).is_err());
        let mut rng = substream(4, "t");
        let mut layer = Conv2d::<f64>::new(1, 1, 3, 1, &mut rng);
        assert!(layer.backward(&g).is_err());
    }

    #[test]
    fn identity_kernel_sum_loss_has_unit_input_grad() {
        let x = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64);
        let ctx = ConvCtx { input: x, weight: Tensor::full(&[1, 1, 1, 1], 1.0), stride: 1, pad: 0 };
        let g = conv2d_backward(Some(&ctx), &Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn bias_grad_is_channel_sum_of_grad_out() {
        let mut rng = substream(5, "t");
        let x = rand_tensor(&[2, 2, 4, 4], &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let go = rand_tensor(&[2, 3, 4, 4], &mut rng);
        let ctx = ConvCtx { input: x, weight: w, stride: 1, pad: 1 };
        let g = conv2d_backward(Some(&ctx), &go).unwrap();
        for o in 0..3 {
            let mut s = 0.0;
            for n in 0..2 {
                s += go.data()[(n * 3 + o) * 16..(n * 3 + o + 1) * 16].iter().sum::<f64>();
            }
            assert!((g.bias.data()[o] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = substream(6, "t");
        for &(s, p, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)] {
            let x = rand_tensor(&[2, 3, 6, 5], &mut rng);
            let w = rand_tensor(&[2, 3, k, k], &mut rng);
            let b = rand_tensor(&[2], &mut rng);
            let y = conv2d(&x, &w, &b, s, p).unwrap();
            let r = rand_tensor(y.shape(), &mut rng);
            let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
                conv2d(x, w, b, s, p).unwrap().data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
            };
            let ctx = ConvCtx { input: x.clone(), weight: w.clone(), stride: s, pad: p };
            let g = conv2d_backward(Some(&ctx), &r).unwrap();
            let fx = finite_diff_grad(|t| Ok(loss(t, &w, &b)), &x, 1e-4).unwrap();
            let fw = finite_diff_grad(|t| Ok(loss(&x, t, &b)), &w, 1e-4).unwrap();
            let fb = finite_diff_grad(|t| Ok(loss(&x, &w, t)), &b, 1e-4).unwrap();
            assert!(relative_error(&g.input, &fx) < 1e-5);
            assert!(relative_error(&g.weight, &fw) < 1e-5);
            assert!(relative_error(&g.bias, &fb) < 1e-5);
        }
    }

    #[test]
    fn layer_backward_matches_functional() {
        let mut rng = substream(7, "t");
        let mut layer = Conv2d::<f64>::new(2, 3, 3, 2, &mut rng);
        let x = rand_tensor(&[2, 2, 6, 6], &mut rng);
        let y = layer.forward(&x).unwrap();
        let go = rand_tensor(y.shape(), &mut rng);
        let gi = layer.backward(&go).unwrap();
        let ctx = ConvCtx { input: x, weight: layer.weight.value.clone(), stride: 2, pad: 1 };
        let g = conv2d_backward(Some(&ctx), &go).unwrap();
        assert_eq!(gi, g.input);
        assert_eq!(layer.weight.grad, g.weight);
        assert_eq!(layer.bias.grad, g.bias);
    }
}
