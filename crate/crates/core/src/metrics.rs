//! Image quality metrics: MSE, PSNR, SSIM and the noise power spectrum.
//!
//! Images are rank-2 `[height, width]` tensors. Masks are row-major `bool`
//! slices of the same size.

use rand::Rng as _;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::rng::{substream, Rng};
use crate::tensor::Tensor;

fn check_pair(a: &Tensor<f64>, b: &Tensor<f64>, op: &'static str) -> Result<(usize, usize)> {
    let dims = a.dims2(op)?;
    b.dims2(op)?;
    a.ensure_same_shape(b, op)?;
    Ok(dims)
}

fn check_mask(mask: Option<&[bool]>, len: usize, op: &'static str) -> Result<()> {
    match mask {
        Some(m) if m.len() != len => Err(Error::shape(op, "mask", len, m.len())),
        _ => Ok(()),
    }
}

pub fn mse(a: &Tensor<f64>, b: &Tensor<f64>, mask: Option<&[bool]>) -> Result<f64> {
    check_pair(a, b, "mse")?;
    check_mask(mask, a.len(), "mse")?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if mask.map_or(true, |m| m[i]) {
            total += (x - y) * (x - y);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Empty("mse mask"));
    }
    Ok(total / count as f64)
}

/// Peak signal-to-noise ratio in dB; `+inf` for identical inputs.
pub fn psnr(reference: &Tensor<f64>, approx: &Tensor<f64>, max_value: f64, mask: Option<&[bool]>) -> Result<f64> {
    if !(max_value > 0.0) {
        return Err(Error::Invalid(format!("psnr dynamic range must be positive, got {max_value}")));
    }
    let e = mse(reference, approx, mask)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (max_value / e.sqrt()).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsimMode {
    /// Square sliding window of the given side, stride 1.
    Window(usize),
    /// One set of statistics over all (masked) pixels.
    Global,
}

impl Default for SsimMode {
    fn default() -> Self {
        SsimMode::Window(8)
    }
}

fn ssim_from(a: &[f64], b: &[f64], c1: f64, c2: f64) -> f64 {
    let n = a.len() as f64;
    let mu_a = a.iter().sum::<f64>() / n;
    let mu_b = b.iter().sum::<f64>() / n;
    let mut va = 0.0;
    let mut vb = 0.0;
    let mut cov = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        va += (x - mu_a) * (x - mu_a);
        vb += (y - mu_b) * (y - mu_b);
        cov += (x - mu_a) * (y - mu_b);
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2))
}

/// Structural similarity with c1 = (0.01 L)^2 and c2 = (0.03 L)^2.
///
/// In window mode the mask selects window centres; in global mode it selects
/// pixels.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>, dynamic_range: f64, mode: SsimMode, mask: Option<&[bool]>) -> Result<f64> {
    let (h, w) = check_pair(a, b, "ssim")?;
    check_mask(mask, a.len(), "ssim")?;
    if !(dynamic_range > 0.0) {
        return Err(Error::Invalid(format!("ssim dynamic range must be positive, got {dynamic_range}")));
    }
    let c1 = (0.01 * dynamic_range).powi(2);
    let c2 = (0.03 * dynamic_range).powi(2);
    match mode {
        SsimMode::Global => {
            let keep = |i: &usize| mask.map_or(true, |m| m[*i]);
            let xa: Vec<f64> = (0..a.len()).filter(keep).map(|i| a.data()[i]).collect();
            let xb: Vec<f64> = (0..b.len()).filter(keep).map(|i| b.data()[i]).collect();
            if xa.is_empty() {
                return Err(Error::Empty("ssim mask"));
            }
            Ok(ssim_from(&xa, &xb, c1, c2))
        }
        SsimMode::Window(k) => {
            if k == 0 || k > h || k > w {
                return Err(Error::Invalid(format!("ssim window {k} does not fit a {h}x{w} image")));
            }
            let mut wa = Vec::with_capacity(k * k);
            let mut wb = Vec::with_capacity(k * k);
            let mut total = 0.0;
            let mut count = 0usize;
            for y in 0..=h - k {
                for x in 0..=w - k {
                    let centre = (y + k / 2) * w + x + k / 2;
                    if !mask.map_or(true, |m| m[centre]) {
                        continue;
                    }
                    wa.clear();
                    wb.clear();
                    for r in y..y + k {
                        wa.extend_from_slice(&a.data()[r * w + x..r * w + x + k]);
                        wb.extend_from_slice(&b.data()[r * w + x..r * w + x + k]);
                    }
                    total += ssim_from(&wa, &wb, c1, c2);
                    count += 1;
                }
            }
            if count == 0 {
                return Err(Error::Empty("ssim window centres"));
            }
            Ok(total / count as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RoiPlacement {
    /// Top-left corners drawn uniformly until they fit inside the mask.
    Seeded(u64),
    /// Explicit top-left corners `(row, col)`.
    Explicit(Vec<(usize, usize)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NpsConfig {
    pub roi_size: usize,
    pub n_roi: usize,
    pub placement: RoiPlacement,
}

impl Default for NpsConfig {
    fn default() -> Self {
        Self { roi_size: 24, n_roi: 8, placement: RoiPlacement::Seeded(0) }
    }
}

impl NpsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.roi_size == 0 || self.roi_size % 2 != 0 {
            return Err(Error::Config(format!("nps roi_size must be even and positive, got {}", self.roi_size)));
        }
        if self.n_roi == 0 {
            return Err(Error::Config("nps n_roi must be positive".into()));
        }
        Ok(())
    }
}

const MAX_PLACEMENT_TRIES: usize = 100_000;

fn roi_fits(top: usize, left: usize, size: usize, h: usize, w: usize, mask: Option<&[bool]>) -> bool {
    if top + size > h || left + size > w {
        return false;
    }
    match mask {
        None => true,
        Some(m) => (top..top + size).all(|r| m[r * w + left..r * w + left + size].iter().all(|&v| v)),
    }
}

/// Top-left corners of the ROIs used by [`nps2d`].
pub fn place_rois(h: usize, w: usize, mask: Option<&[bool]>, cfg: &NpsConfig) -> Result<Vec<(usize, usize)>> {
    cfg.validate()?;
    check_mask(mask, h * w, "nps")?;
    let s = cfg.roi_size;
    match &cfg.placement {
        RoiPlacement::Explicit(corners) => {
            if corners.is_empty() {
                return Err(Error::Empty("nps roi list"));
            }
            for &(t, l) in corners {
                if !roi_fits(t, l, s, h, w, mask) {
                    return Err(Error::Invalid(format!("roi at ({t}, {l}) of size {s} leaves the {h}x{w} image or its mask")));
                }
            }
            Ok(corners.clone())
        }
        RoiPlacement::Seeded(seed) => {
            if s > h || s > w {
                return Err(Error::Invalid(format!("roi size {s} exceeds the {h}x{w} image")));
            }
            let mut rng: Rng = substream(*seed, "nps-roi");
            let mut out = Vec::with_capacity(cfg.n_roi);
            for _ in 0..MAX_PLACEMENT_TRIES {
                let t = rng.gen_range(0..=h - s);
                let l = rng.gen_range(0..=w - s);
                if roi_fits(t, l, s, h, w, mask) {
                    out.push((t, l));
                    if out.len() == cfg.n_roi {
                        return Ok(out);
                    }
                }
            }
            Err(Error::Invalid(format!("could not place {} rois of size {s} inside the mask", cfg.n_roi)))
        }
    }
}

/// Unnormalized forward 2-D DFT of a square real block, row-major.
fn dft2(block: &[f64], n: usize, planner: &mut FftPlanner<f64>) -> Vec<Complex<f64>> {
    let fft = planner.plan_fft_forward(n);
    let mut buf: Vec<Complex<f64>> = block.iter().map(|&v| Complex::new(v, 0.0)).collect();
    for row in buf.chunks_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for c in 0..n {
        for r in 0..n {
            col[r] = buf[r * n + c];
        }
        fft.process(&mut col);
        for r in 0..n {
            buf[r * n + c] = col[r];
        }
    }
    buf
}

/// Power spectrum of one mean-removed ROI, |F|^2 / (Lx Ly).
pub fn roi_power(error: &Tensor<f64>, top: usize, left: usize, size: usize) -> Result<Tensor<f64>> {
    let (h, w) = error.dims2("nps")?;
    if !roi_fits(top, left, size, h, w, None) {
        return Err(Error::Invalid(format!("roi at ({top}, {left}) of size {size} leaves the {h}x{w} image")));
    }
    let mut block = Vec::with_capacity(size * size);
    for r in top..top + size {
        block.extend_from_slice(&error.data()[r * w + left..r * w + left + size]);
    }
    let mean = block.iter().sum::<f64>() / block.len() as f64;
    block.iter_mut().for_each(|v| *v -= mean);
    let spec = dft2(&block, size, &mut FftPlanner::new());
    let norm = (size * size) as f64;
    Tensor::from_vec(&[size, size], spec.iter().map(|c| c.norm_sqr() / norm).collect())
}

/// Noise power spectrum averaged over ROIs, DC at index (0, 0).
pub fn nps2d(error: &Tensor<f64>, mask: Option<&[bool]>, cfg: &NpsConfig) -> Result<Tensor<f64>> {
    let (h, w) = error.dims2("nps")?;
    let corners = place_rois(h, w, mask, cfg)?;
    let s = cfg.roi_size;
    let mut acc = Tensor::zeros(&[s, s]);
    for &(t, l) in &corners {
        acc.add_assign(&roi_power(error, t, l, s)?)?;
    }
    Ok(acc.scale(1.0 / corners.len() as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadialBin {
    /// Rounded distance from DC in frequency-index units.
    pub radius: usize,
    pub count: usize,
    pub sum: f64,
    pub mean: f64,
}

fn signed_freq(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Radial average of an unshifted square spectrum, DC excluded.
pub fn radial_average(nps: &Tensor<f64>) -> Result<Vec<RadialBin>> {
    let (h, w) = nps.dims2("radial_average")?;
    if h != w {
        return Err(Error::shape("radial_average", "width", h, w));
    }
    let mut bins: Vec<RadialBin> = Vec::new();
    for v in 0..h {
        for u in 0..w {
            if u == 0 && v == 0 {
                continue;
            }
            let r = signed_freq(u, w).hypot(signed_freq(v, h)).round() as usize;
            while bins.len() < r {
                bins.push(RadialBin { radius: bins.len() + 1, count: 0, sum: 0.0, mean: 0.0 });
            }
            let b = &mut bins[r - 1];
            b.count += 1;
            b.sum += nps.data()[v * w + u];
        }
    }
    for b in &mut bins {
        b.mean = if b.count > 0 { b.sum / b.count as f64 } else { 0.0 };
    }
    Ok(bins)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub psnr_full: f64,
    pub psnr_roi: f64,
    pub ssim_roi: f64,
    /// `(radius, mean amplitude)` pairs.
    pub nps_radial: Vec<(f64, f64)>,
}

/// Full-frame PSNR plus PSNR, SSIM and radial NPS restricted to `roi_mask`.
pub fn evaluate_pair(pred: &Tensor<f64>, gt: &Tensor<f64>, roi_mask: &[bool], dynamic_range: f64, nps: &NpsConfig) -> Result<MetricsReport> {
    let psnr_full = psnr(gt, pred, dynamic_range, None)?;
    let psnr_roi = psnr(gt, pred, dynamic_range, Some(roi_mask))?;
    let ssim_roi = ssim(gt, pred, dynamic_range, SsimMode::default(), Some(roi_mask))?;
    let error = pred.zip_map(gt, |p, g| p - g)?;
    let spectrum = nps2d(&error, Some(roi_mask), nps)?;
    let nps_radial = radial_average(&spectrum)?.iter().map(|b| (b.radius as f64, b.mean)).collect();
    Ok(MetricsReport { psnr_full, psnr_roi, ssim_roi, nps_radial })
}
