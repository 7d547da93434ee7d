//! Synthetic paired radiograph phantoms.
//!
//! `clean` is soft tissue only, `bones` holds rib-like bands, and the
//! composite is their exact sum. All three are 16-bit.

use rand::{Rng as _, SeedableRng};

use super::RawImage;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    /// Upper clip for the soft-tissue image.
    pub clean_max: u16,
    /// Range of per-band peak intensities.
    pub bone_peak: (f64, f64),
    /// Inclusive range for the number of bands.
    pub n_bones: (usize, usize),
    /// Accepted fraction of image pixels covered by bone.
    pub band_fraction: (f64, f64),
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self { clean_max: 40000, bone_peak: (12000.0, 20000.0), n_bones: (3, 6), band_fraction: (0.05, 0.30) }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.bone_peak;
        if !(lo > 0.0 && lo <= hi && self.clean_max as f64 + hi <= 65535.0) {
            return Err(Error::Config(format!("bone_peak {lo}..{hi} must be positive and fit above clean_max {}", self.clean_max)));
        }
        if self.n_bones.0 == 0 || self.n_bones.0 > self.n_bones.1 {
            return Err(Error::Config(format!("n_bones range {:?} is empty", self.n_bones)));
        }
        let (a, b) = self.band_fraction;
        if !(0.0..1.0).contains(&a) || !(a < b && b <= 1.0) {
            return Err(Error::Config(format!("band_fraction range {a}..{b} is invalid")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomPair {
    pub clean: RawImage,
    pub bones: RawImage,
    pub composite: RawImage,
    /// Soft-tissue region, row-major.
    pub roi_mask: Vec<bool>,
    /// Fraction of pixels with non-zero bone signal.
    pub band_fraction: f64,
}

const MASK_AXES: (f64, f64) = (0.42, 0.44);
const MAX_BONE_DRAWS: usize = 256;

/// Normalized elliptic radius; 1 on the mask boundary.
fn ellipse_radius(u: f64, v: f64) -> f64 {
    (((u - 0.5) / MASK_AXES.0).powi(2) + ((v - 0.5) / MASK_AXES.1).powi(2)).sqrt()
}

fn taper(r: f64, inner: f64, outer: f64) -> f64 {
    if r <= inner {
        1.0
    } else if r >= outer {
        0.0
    } else {
        let t = (r - inner) / (outer - inner);
        (t * std::f64::consts::FRAC_PI_2).cos().powi(2)
    }
}

fn coords(size: usize, i: usize) -> (f64, f64) {
    (((i % size) as f64 + 0.5) / size as f64, ((i / size) as f64 + 0.5) / size as f64)
}

fn soft_tissue(size: usize, cfg: &PhantomConfig, rng: &mut Rng) -> Vec<f64> {
    let n = size * size;
    let two_pi = 2.0 * std::f64::consts::PI;

    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(0.0..two_pi), rng.gen_range(500.0..2500.0)))
        .collect();
    let base = rng.gen_range(16000.0..22000.0);

    let n_blobs = rng.gen_range(4..=10);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            let a = rng.gen_range(0.0..two_pi);
            let r = rng.gen_range(0.0..0.8f64).sqrt();
            (0.5 + r * MASK_AXES.0 * a.cos(), 0.5 + r * MASK_AXES.1 * a.sin(), rng.gen_range(0.03..0.09), rng.gen_range(-3000.0..5000.0))
        })
        .collect();

    // Vessels fan out from the hilum as quadratic Bezier curves.
    let n_vessels = rng.gen_range(4..=9);
    let mut vessels = Vec::with_capacity(n_vessels);
    for _ in 0..n_vessels {
        let p0 = (rng.gen_range(0.38..0.62), rng.gen_range(0.38..0.55));
        let a = rng.gen_range(0.0..two_pi);
        let r = rng.gen_range(0.4..0.85);
        let p2 = (0.5 + r * MASK_AXES.0 * a.cos(), 0.5 + r * MASK_AXES.1 * a.sin());
        let p1 = ((p0.0 + p2.0) / 2.0 + rng.gen_range(-0.08..0.08), (p0.1 + p2.1) / 2.0 + rng.gen_range(-0.08..0.08));
        let sigma = rng.gen_range(0.5..0.9) / size as f64;
        let amp = rng.gen_range(1500.0..3500.0);
        let pts: Vec<(f64, f64)> = (0..=48)
            .map(|k| {
                let t = k as f64 / 48.0;
                let s = 1.0 - t;
                (s * s * p0.0 + 2.0 * s * t * p1.0 + t * t * p2.0, s * s * p0.1 + 2.0 * s * t * p1.1 + t * t * p2.1)
            })
            .collect();
        vessels.push((pts, sigma, amp));
    }

    (0..n)
        .map(|i| {
            let (u, v) = coords(size, i);
            let body = taper(ellipse_radius(u, v), 0.85, 1.08);
            let mut val = base;
            for &(fx, fy, ph, amp) in &waves {
                val += amp * (two_pi * (fx * u + fy * v) + ph).cos();
            }
            for &(cx, cy, s, amp) in &blobs {
                val += amp * (-((u - cx).powi(2) + (v - cy).powi(2)) / (2.0 * s * s)).exp();
            }
            for (pts, s, amp) in &vessels {
                let d2 = pts.iter().map(|p| (u - p.0).powi(2) + (v - p.1).powi(2)).fold(f64::INFINITY, f64::min);
                val += amp * (-d2 / (2.0 * s * s)).exp();
            }
            (4000.0 + body * val).clamp(0.0, cfg.clean_max as f64)
        })
        .collect()
}

fn rib_bands(size: usize, cfg: &PhantomConfig, mask: &[bool], rng: &mut Rng) -> Vec<f64> {
    let count = rng.gen_range(cfg.n_bones.0..=cfg.n_bones.1);
    let ribs: Vec<_> = (0..count)
        .map(|k| {
            let v0 = 0.12 + (k as f64 + 0.5) * 0.7 / count as f64 + rng.gen_range(-0.03..0.03);
            let curvature = rng.gen_range(0.4..1.2);
            let tilt = rng.gen_range(-0.2..0.2);
            let u0 = rng.gen_range(0.45..0.55);
            let half_width = rng.gen_range(0.018..0.035);
            let peak = rng.gen_range(cfg.bone_peak.0..=cfg.bone_peak.1);
            (v0, curvature, tilt, u0, half_width, peak)
        })
        .collect();
    (0..size * size)
        .map(|i| {
            if !mask[i] {
                return 0.0;
            }
            let (u, v) = coords(size, i);
            ribs.iter()
                .map(|&(v0, c, s, u0, hw, peak)| {
                    let centre = v0 + c * (u - u0).powi(2) + s * (u - 0.5);
                    let slope = 2.0 * c * (u - u0) + s;
                    let d = (v - centre).abs() / (1.0 + slope * slope).sqrt();
                    if d < hw {
                        peak * (std::f64::consts::FRAC_PI_2 * d / hw).cos().powi(2)
                    } else {
                        0.0
                    }
                })
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Deterministic phantom for `seed`. `size` must be even (at least 8).
pub fn generate_phantom(seed: u64, size: usize, cfg: &PhantomConfig) -> Result<PhantomPair> {
    cfg.validate()?;
    if size % 2 != 0 || size < 8 {
        return Err(Error::Invalid(format!("phantom size must be even and at least 8, got {size}")));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let mask: Vec<bool> = (0..size * size)
        .map(|i| {
            let (u, v) = coords(size, i);
            ellipse_radius(u, v) <= 1.0
        })
        .collect();

    let clean: Vec<u16> = soft_tissue(size, cfg, &mut rng).iter().map(|v| v.round() as u16).collect();

    let n = (size * size) as f64;
    for _ in 0..MAX_BONE_DRAWS {
        let bones: Vec<u16> = rib_bands(size, cfg, &mask, &mut rng).iter().map(|v| v.round() as u16).collect();
        let fraction = bones.iter().filter(|&&b| b > 0).count() as f64 / n;
        if fraction < cfg.band_fraction.0 || fraction > cfg.band_fraction.1 {
            continue;
        }
        let composite: Vec<u16> = clean.iter().zip(&bones).map(|(c, b)| c + b).collect();
        return Ok(PhantomPair {
            clean: RawImage::new(size, size, 65535, clean)?,
            bones: RawImage::new(size, size, 65535, bones)?,
            composite: RawImage::new(size, size, 65535, composite)?,
            roi_mask: mask,
            band_fraction: fraction,
        });
    }
    Err(Error::Invalid(format!(
        "no bone layout within band fraction {:?} after {MAX_BONE_DRAWS} draws",
        cfg.band_fraction
    )))
}
