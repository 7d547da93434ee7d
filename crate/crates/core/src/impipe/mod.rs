//! Image I/O, preprocessing and the synthetic paired-phantom dataset.

mod dataset;
mod histogram;
mod phantom;
mod pgm;

pub(crate) use dataset::csv_error;
pub use dataset::{load_dataset, read_manifest, split_dataset, write_dataset, Dataset, ManifestRow, Sample, Split, SplitIndices, SplitSpec};
pub use histogram::{histogram_match, kolmogorov_distance};
pub use phantom::{generate_phantom, PhantomConfig, PhantomPair};
pub use pgm::{decode_pgm, encode_pgm, read_mask, read_pgm, write_mask, write_pgm};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 16-bit grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u16>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, maxval: u16, pixels: Vec<u16>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Empty("image"));
        }
        if maxval == 0 {
            return Err(Error::Invalid("maxval must be positive".into()));
        }
        if pixels.len() != width * height {
            return Err(Error::shape("RawImage", "pixels", width * height, pixels.len()));
        }
        if let Some(p) = pixels.iter().find(|&&p| p > maxval) {
            return Err(Error::Invalid(format!("pixel value {p} exceeds maxval {maxval}")));
        }
        Ok(Self { width, height, maxval, pixels })
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::from_fn(&[self.height, self.width], |i| self.pixels[i] as f64)
    }

    /// Rounds and clamps a `[height, width]` tensor into `[0, maxval]`.
    pub fn from_tensor(t: &Tensor<f64>, maxval: u16) -> Result<Self> {
        let (h, w) = t.dims2("RawImage::from_tensor")?;
        t.ensure_finite("RawImage::from_tensor")?;
        let pixels = t.data().iter().map(|v| v.round().clamp(0.0, maxval as f64) as u16).collect();
        Self::new(w, h, maxval, pixels)
    }
}

pub const DEFAULT_WINDOW_CENTER: f64 = 32767.5;
pub const DEFAULT_WINDOW_WIDTH: f64 = 65535.0;

/// Linear window: clamp((p - (center - width/2)) / width, 0, 1).
pub fn linear_window(img: &RawImage, center: f64, width: f64) -> Result<Tensor<f64>> {
    if !(width > 0.0) || !center.is_finite() || !width.is_finite() {
        return Err(Error::Invalid(format!("window needs finite center and positive width, got {center}/{width}")));
    }
    let lo = center - width / 2.0;
    Ok(img.to_tensor().map(|p| ((p - lo) / width).clamp(0.0, 1.0)))
}

/// Per-image standardization parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZScore {
    pub mean: f64,
    pub std: f64,
}

impl ZScore {
    /// Population mean and standard deviation of `t`.
    pub fn fit(t: &Tensor<f64>) -> Result<Self> {
        if t.is_empty() {
            return Err(Error::Empty("normalize_zscore"));
        }
        t.ensure_finite("normalize_zscore")?;
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 0.0) {
            return Err(Error::Invalid("normalize_zscore: image is constant".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, t: &Tensor<f64>) -> Tensor<f64> {
        t.map(|v| (v - self.mean) / self.std)
    }

    pub fn invert(&self, t: &Tensor<f64>) -> Tensor<f64> {
        t.map(|v| v * self.std + self.mean)
    }
}

/// Zero mean, unit standard deviation.
pub fn normalize_zscore(t: &Tensor<f64>) -> Result<Tensor<f64>> {
    Ok(ZScore::fit(t)?.apply(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng as _;

    #[test]
    fn raw_image_checks() {
        assert!(RawImage::new(2, 2, 10, vec![0, 1, 2, 3]).is_ok());
        assert!(RawImage::new(2, 2, 10, vec![0, 1, 2]).is_err());
        assert!(RawImage::new(2, 2, 10, vec![0, 1, 2, 11]).is_err());
        assert!(RawImage::new(0, 2, 10, vec![]).is_err());
        let t = Tensor::from_vec(&[1, 3], vec![-4.0, 7.6, 1e9]).unwrap();
        assert_eq!(RawImage::from_tensor(&t, 100).unwrap().pixels, vec![0, 8, 100]);
    }

    #[test]
    fn window_examples() {
        let img = RawImage::new(4, 1, 65535, vec![2048, 3072, 0, 5000]).unwrap();
        let out = linear_window(&img, 2048.0, 4096.0).unwrap();
        assert_eq!(out.data(), &[0.5, 0.75, 0.0, 1.0]);
        let full = RawImage::new(2, 1, 65535, vec![0, 65535]).unwrap();
        assert_eq!(linear_window(&full, DEFAULT_WINDOW_CENTER, DEFAULT_WINDOW_WIDTH).unwrap().data(), &[0.0, 1.0]);
        assert!(linear_window(&img, 0.0, 0.0).is_err());
    }

    #[test]
    fn zscore_definition_and_invariance() {
        let mut rng = substream(1, "z");
        let x = Tensor::from_fn(&[13, 11], |_| rng.gen_range(-3.0..50.0));
        let z = normalize_zscore(&x).unwrap();
        let n = z.len() as f64;
        let mean = z.sum() / n;
        let sd = (z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-12);
        assert!((sd - 1.0).abs() < 1e-12);

        let y = normalize_zscore(&x.map(|v| 3.5 * v - 20.0)).unwrap();
        assert!(y.max_abs_diff(&z).unwrap() < 1e-12);

        // Two-pass oracle.
        let m: f64 = x.data().iter().sum::<f64>() / n;
        let s = (x.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
        for (a, b) in x.data().iter().zip(z.data()) {
            assert!(((a - m) / s - b).abs() < 1e-12);
        }
        let fit = ZScore::fit(&x).unwrap();
        assert!(fit.invert(&z).max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn zscore_rejects_constant() {
        assert!(normalize_zscore(&Tensor::full(&[3, 3], 7.0)).is_err());
    }
}
