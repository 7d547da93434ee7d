//! Histogram matching by nearest cumulative-histogram lookup.

use super::RawImage;
use crate::error::{Error, Result};

fn bin_of(p: u16, maxval: u16, n_bins: usize) -> usize {
    p as usize * n_bins / (maxval as usize + 1)
}

/// Monotone gray-level map sending the CDF of `source` onto that of `target`.
///
/// Gray levels are grouped into `n_bins` equal bins per image; each source
/// bin maps to the occupied target bin whose CDF value is nearest (ties go to
/// the darker bin) and takes the smallest target value found in that bin.
pub fn histogram_match(source: &RawImage, target: &RawImage, n_bins: usize) -> Result<RawImage> {
    if !(1..=65536).contains(&n_bins) {
        return Err(Error::Invalid(format!("histogram_match: n_bins must be in 1..=65536, got {n_bins}")));
    }
    let mut src_hist = vec![0usize; n_bins];
    for &p in &source.pixels {
        src_hist[bin_of(p, source.maxval, n_bins)] += 1;
    }
    let mut tgt_hist = vec![0usize; n_bins];
    let mut tgt_rep = vec![u16::MAX; n_bins];
    for &p in &target.pixels {
        let b = bin_of(p, target.maxval, n_bins);
        tgt_hist[b] += 1;
        tgt_rep[b] = tgt_rep[b].min(p);
    }

    // Occupied target bins with their CDF values, ascending.
    let nt = target.pixels.len() as f64;
    let mut tgt_cdf = Vec::new();
    let mut acc = 0usize;
    for b in 0..n_bins {
        if tgt_hist[b] > 0 {
            acc += tgt_hist[b];
            tgt_cdf.push((acc as f64 / nt, tgt_rep[b]));
        }
    }

    let ns = source.pixels.len() as f64;
    let mut lut = vec![0u16; n_bins];
    let mut acc = 0usize;
    let mut j = 0usize;
    for b in 0..n_bins {
        if src_hist[b] == 0 {
            continue;
        }
        acc += src_hist[b];
        let c = acc as f64 / ns;
        // Source CDF only grows, so the nearest target index never moves back.
        while j + 1 < tgt_cdf.len() && (tgt_cdf[j + 1].0 - c).abs() < (tgt_cdf[j].0 - c).abs() {
            j += 1;
        }
        lut[b] = tgt_cdf[j].1;
    }

    let pixels = source.pixels.iter().map(|&p| lut[bin_of(p, source.maxval, n_bins)]).collect();
    RawImage::new(source.width, source.height, target.maxval, pixels)
}

/// Largest gap between the empirical CDFs of two images over gray values.
pub fn kolmogorov_distance(a: &RawImage, b: &RawImage) -> f64 {
    let mut xa = a.pixels.clone();
    let mut xb = b.pixels.clone();
    xa.sort_unstable();
    xb.sort_unstable();
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut worst = 0.0f64;
    while i < xa.len() || j < xb.len() {
        let v = match (xa.get(i), xb.get(j)) {
            (Some(&p), Some(&q)) => p.min(q),
            (Some(&p), None) => p,
            (None, Some(&q)) => q,
            (None, None) => break,
        };
        while i < xa.len() && xa[i] == v {
            i += 1;
        }
        while j < xb.len() && xb[j] == v {
            j += 1;
        }
        worst = worst.max((i as f64 / na - j as f64 / nb).abs());
    }
    worst
}
