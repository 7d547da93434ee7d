//! One-level orthonormal Haar 2-D transform.
//!
//! For every 2×2 block `[[a, b], [c, d]]`:
//!
//! ```text
//! ll = (a + b + c + d) / 2     lh = (a - b + c - d) / 2
//! hl = (a + b - c - d) / 2     hh = (a - b - c + d) / 2
//! ```
//!
//! `lh` responds to changes along a row (vertical edges), `hl` to changes
//! down a column (horizontal edges, e.g. ribs), `hh` to the diagonal.
//! The basis is orthonormal, so energy is preserved and the inverse is the
//! transpose.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Channel order used by [`pack_subbands`].
pub const SUBBAND_NAMES: [&str; 4] = ["ll", "lh", "hl", "hh"];

#[derive(Clone, Debug, PartialEq)]
pub struct SubbandSet<T> {
    pub ll: Tensor<T>,
    pub lh: Tensor<T>,
    pub hl: Tensor<T>,
    pub hh: Tensor<T>,
}

impl<T: Scalar> SubbandSet<T> {
    pub fn energy(&self) -> T {
        self.ll.sum_squares() + self.lh.sum_squares() + self.hl.sum_squares() + self.hh.sum_squares()
    }

    /// `(h/2, w/2)` of each band.
    pub fn band_dims(&self) -> Result<(usize, usize)> {
        self.ll.dims2("SubbandSet")
    }
}

fn image_dims<T: Scalar>(image: &Tensor<T>) -> Result<(usize, usize)> {
    let (h, w) = image.dims2("haar_decompose")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Invalid(format!(
            "haar_decompose: image is {h}x{w}; both dimensions must be even (pad the image by one row/column)"
        )));
    }
    Ok((h, w))
}

/// Splits a `[h, w]` image into four `[h/2, w/2]` bands.
pub fn haar_decompose<T: Scalar>(image: &Tensor<T>) -> Result<SubbandSet<T>> {
    let (h, w) = image_dims(image)?;
    let mut out = [(); 4].map(|_| Vec::with_capacity(h * w / 4));
    decompose_plane(image.data(), h, w, &mut out);
    let [ll, lh, hl, hh] = out.map(|d| Tensor::from_vec_unchecked_finite(&[h / 2, w / 2], d).expect("band size"));
    Ok(SubbandSet { ll, lh, hl, hh })
}

fn decompose_plane<T: Scalar>(px: &[T], h: usize, w: usize, out: &mut [Vec<T>; 4]) {
    let half = T::lit(0.5);
    for y in (0..h).step_by(2) {
        for x in (0..w).step_by(2) {
            let a = px[y * w + x];
            let b = px[y * w + x + 1];
            let c = px[(y + 1) * w + x];
            let d = px[(y + 1) * w + x + 1];
            out[0].push((a + b + c + d) * half);
            out[1].push((a - b + c - d) * half);
            out[2].push((a + b - c - d) * half);
            out[3].push((a - b - c + d) * half);
        }
    }
}

fn reconstruct_plane<T: Scalar>(bands: [&[T]; 4], hh2: usize, ww2: usize, out: &mut [T]) {
    let half = T::lit(0.5);
    let w = ww2 * 2;
    for y in 0..hh2 {
        for x in 0..ww2 {
            let i = y * ww2 + x;
            let (s, v, hz, d) = (bands[0][i], bands[1][i], bands[2][i], bands[3][i]);
            out[2 * y * w + 2 * x] = (s + v + hz + d) * half;
            out[2 * y * w + 2 * x + 1] = (s - v + hz - d) * half;
            out[(2 * y + 1) * w + 2 * x] = (s + v - hz - d) * half;
            out[(2 * y + 1) * w + 2 * x + 1] = (s - v - hz + d) * half;
        }
    }
}

/// Exact inverse of [`haar_decompose`].
pub fn haar_reconstruct<T: Scalar>(s: &SubbandSet<T>) -> Result<Tensor<T>> {
    let (h2, w2) = s.band_dims()?;
    for band in [&s.lh, &s.hl, &s.hh] {
        s.ll.ensure_same_shape(band, "haar_reconstruct")?;
    }
    let mut out = Tensor::zeros(&[2 * h2, 2 * w2]);
    reconstruct_plane([s.ll.data(), s.lh.data(), s.hl.data(), s.hh.data()], h2, w2, out.data_mut());
    Ok(out)
}

/// `[4, h/2, w/2]` in `ll, lh, hl, hh` order.
pub fn pack_subbands<T: Scalar>(s: &SubbandSet<T>) -> Result<Tensor<T>> {
    let (h2, w2) = s.band_dims()?;
    let mut data = Vec::with_capacity(4 * h2 * w2);
    for band in [&s.ll, &s.lh, &s.hl, &s.hh] {
        s.ll.ensure_same_shape(band, "pack_subbands")?;
        data.extend_from_slice(band.data());
    }
    Tensor::from_vec_unchecked_finite(&[4, h2, w2], data)
}

pub fn unpack_subbands<T: Scalar>(packed: &Tensor<T>) -> Result<SubbandSet<T>> {
    let (c, h2, w2) = match *packed.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("unpack_subbands", "rank", 3, packed.rank())),
    };
    if c != 4 {
        return Err(Error::shape("unpack_subbands", "channel axis", 4, c));
    }
    let mut bands = packed.data().chunks(h2 * w2).map(|d| {
        Tensor::from_vec_unchecked_finite(&[h2, w2], d.to_vec()).expect("band size")
    });
    Ok(SubbandSet {
        ll: bands.next().unwrap(),
        lh: bands.next().unwrap(),
        hl: bands.next().unwrap(),
        hh: bands.next().unwrap(),
    })
}

/// Batched decomposition: `[n, 1, h, w] -> [n, 4, h/2, w/2]`.
pub fn decompose_batch<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("decompose_batch")?;
    if c != 1 {
        return Err(Error::shape("decompose_batch", "channel axis", 1, c));
    }
    let mut data = Vec::with_capacity(n * h * w);
    for img in x.data().chunks(h * w) {
        let s = haar_decompose(&Tensor::from_vec_unchecked_finite(&[h, w], img.to_vec())?)?;
        data.extend(pack_subbands(&s)?.into_data());
    }
    Tensor::from_vec_unchecked_finite(&[n, 4, h / 2, w / 2], data)
}

/// Batched reconstruction: `[n, 4, h2, w2] -> [n, 1, 2·h2, 2·w2]`. Because the
/// transform is orthonormal this is also the adjoint of [`decompose_batch`].
pub fn reconstruct_batch<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h2, w2) = x.dims4("reconstruct_batch")?;
    if c != 4 {
        return Err(Error::shape("reconstruct_batch", "channel axis", 4, c));
    }
    let band = h2 * w2;
    let mut out = Tensor::zeros(&[n, 1, 2 * h2, 2 * w2]);
    for (src, dst) in x.data().chunks(4 * band).zip(out.data_mut().chunks_mut(4 * band)) {
        reconstruct_plane(
            [&src[..band], &src[band..2 * band], &src[2 * band..3 * band], &src[3 * band..]],
            h2,
            w2,
            dst,
        );
    }
    Ok(out)
}
