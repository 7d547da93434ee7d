//! Minibatch discrimination.
//!
//! Each sample's feature row `f_i ∈ R^A` is projected through a learned
//! tensor `T ∈ R^{A×B×C}` to `M_i ∈ R^{B×C}`. For every kernel `b` the layer
//! emits `o_b(x_i) = Σ_j exp(−‖M_{i,b} − M_{j,b}‖₁)`, summing over the whole
//! batch including `j = i`. Outputs are concatenated to the features by the
//! caller.
//!
//! Each per-sample sum is accumulated in ascending order of its terms, so the
//! layer is exactly permutation-equivariant in floating point.

use crate::error::{Error, Result};
use crate::nn::{join, Module, Parameter};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct MbdParams<T> {
    /// `[A, B, C]`.
    pub t: Parameter<T>,
}

impl<T: Scalar> MbdParams<T> {
    pub fn new(features: usize, kernels: usize, kernel_dim: usize, rng: &mut Rng) -> Self {
        MbdParams {
            t: Parameter::init_uniform(&[features, kernels, kernel_dim], features, rng),
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.t.value.shape();
        (s[0], s[1], s[2])
    }
}

fn check_shapes<T: Scalar>(f: &Tensor<T>, t: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let (n, a) = f.dims2("minibatch_discrimination")?;
    let &[ta, b, c] = t.shape() else {
        return Err(Error::shape("minibatch_discrimination", "kernel rank", 3, t.rank()));
    };
    if ta != a {
        return Err(Error::shape("minibatch_discrimination", "feature axis (kernel dim 0)", a, ta));
    }
    if n == 0 {
        return Err(Error::Empty("minibatch_discrimination"));
    }
    Ok((n, a, b, c))
}

/// `M = F · T` as `[n, B·C]`, one dot product per entry in feature order.
fn project<T: Scalar>(f: &Tensor<T>, t: &Tensor<T>, n: usize, a: usize, bc: usize) -> Vec<T> {
    let mut m = vec![T::zero(); n * bc];
    for i in 0..n {
        let row = &f.data()[i * a..(i + 1) * a];
        let out = &mut m[i * bc..(i + 1) * bc];
        for (ai, &fv) in row.iter().enumerate() {
            let trow = &t.data()[ai * bc..(ai + 1) * bc];
            out.iter_mut().zip(trow).for_each(|(o, &tv)| *o += fv * tv);
        }
    }
    m
}

/// `e[(i·n + j)·B + b] = exp(−‖M_{i,b} − M_{j,b}‖₁)`.
fn similarity<T: Scalar>(m: &[T], n: usize, b: usize, c: usize) -> Vec<T> {
    let bc = b * c;
    let mut e = vec![T::zero(); n * n * b];
    for i in 0..n {
        for j in 0..n {
            for k in 0..b {
                let mi = &m[i * bc + k * c..i * bc + (k + 1) * c];
                let mj = &m[j * bc + k * c..j * bc + (k + 1) * c];
                let d: T = mi.iter().zip(mj).map(|(&p, &q)| (p - q).abs()).sum();
                e[(i * n + j) * b + k] = (-d).exp();
            }
        }
    }
    e
}

fn sorted_sum<T: Scalar>(terms: &mut [T]) -> T {
    terms.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    terms.iter().copied().sum()
}

/// `F [n, A]`, `T [A, B, C]` → `o [n, B]`.
pub fn minibatch_discrimination<T: Scalar>(f: &Tensor<T>, t: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, a, b, c) = check_shapes(f, t)?;
    let m = project(f, t, n, a, b * c);
    let e = similarity(&m, n, b, c);
    let mut out = Vec::with_capacity(n * b);
    let mut terms = vec![T::zero(); n];
    for i in 0..n {
        for k in 0..b {
            for (j, slot) in terms.iter_mut().enumerate() {
                *slot = e[(i * n + j) * b + k];
            }
            out.push(sorted_sum(&mut terms));
        }
    }
    Tensor::from_vec_unchecked_finite(&[n, b], out)
}

/// Returns `(dF, dT)` given `dL/do`.
pub fn minibatch_discrimination_backward<T: Scalar>(
    f: &Tensor<T>,
    t: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, a, b, c) = check_shapes(f, t)?;
    if grad_out.shape() != [n, b] {
        return Err(Error::shape("minibatch_discrimination_backward", "grad shape", format!("[{n}, {b}]"), format!("{:?}", grad_out.shape())));
    }
    let bc = b * c;
    let m = project(f, t, n, a, bc);
    let e = similarity(&m, n, b, c);
    let g = grad_out.data();
    // o_i and o_j both contain e_ij, and ∂‖M_i − M_j‖₁/∂M_i = sign(M_i − M_j)
    let mut dm = vec![T::zero(); n * bc];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            for k in 0..b {
                let w = (g[i * b + k] + g[j * b + k]) * e[(i * n + j) * b + k];
                for ci in 0..c {
                    let diff = m[i * bc + k * c + ci] - m[j * bc + k * c + ci];
                    let s = if diff > T::zero() {
                        T::one()
                    } else if diff < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    dm[i * bc + k * c + ci] -= w * s;
                }
            }
        }
    }
    let mut df = Tensor::zeros(&[n, a]);
    let mut dt = Tensor::zeros(&[a, b, c]);
    // dF = dM · Tᵀ,  dT = Fᵀ · dM
    T::gemm(n, bc, a, T::one(), &dm, bc as isize, 1, t.data(), 1, bc as isize, T::zero(), df.data_mut(), a as isize, 1);
    T::gemm(a, n, bc, T::one(), f.data(), 1, a as isize, &dm, bc as isize, 1, T::zero(), dt.data_mut(), bc as isize, 1);
    Ok((df, dt))
}

/// Layer wrapper with a forward cache.
#[derive(Clone, Debug)]
pub struct MinibatchDiscrimination<T> {
    pub params: MbdParams<T>,
    saved: Option<Tensor<T>>,
}

impl<T: Scalar> MinibatchDiscrimination<T> {
    pub fn new(features: usize, kernels: usize, kernel_dim: usize, rng: &mut Rng) -> Self {
        MinibatchDiscrimination {
            params: MbdParams::new(features, kernels, kernel_dim, rng),
            saved: None,
        }
    }

    pub fn kernels(&self) -> usize {
        self.params.dims().1
    }

    pub fn infer(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        minibatch_discrimination(f, &self.params.t.value)
    }

    pub fn forward(&mut self, f: &Tensor<T>) -> Result<Tensor<T>> {
        let o = self.infer(f)?;
        self.saved = Some(f.clone());
        Ok(o)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let f = self
            .saved
            .take()
            .ok_or_else(|| Error::Invalid("minibatch discrimination backward without forward".into()))?;
        let (df, dt) = minibatch_discrimination_backward(&f, &self.params.t.value, grad)?;
        self.params.t.grad.add_assign(&dt)?;
        Ok(df)
    }
}

impl<T: Scalar> Module<T> for MinibatchDiscrimination<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter<T>)) {
        f(&join(prefix, "t"), &self.params.t);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter<T>)) {
        f(&join(prefix, "t"), &mut self.params.t);
    }
}
