//! Scoring of decomposed layers against ground truth.
//!
//! All metrics take `(estimate, truth, mask)` and only look at masked
//! pixels. The scale-invariant variants fit one global scale to the
//! estimate first, because albedo and shading are only defined up to a
//! reciprocal scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{LayerDecomposition, LinearImage, PixelMask};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
pub const LMSE_WINDOW: usize = 20;
pub const LMSE_STRIDE: usize = 10;
/// Windows with fewer masked pixels are left out of the LMSE average.
pub const LMSE_MIN_PIXELS: usize = 10;

fn check(x: &LinearImage, y: &LinearImage, mask: &PixelMask) -> Result<()> {
    x.check_dims(y, "metric operands")?;
    mask.check_image(x)?;
    mask.require_nonempty()
}

/// Least-squares scale fitting `x` to `y` over the given sample indices;
/// zero when `x` vanishes there.
fn fit_scale(x: &[f64], y: &[f64], idx: impl Iterator<Item = usize> + Clone) -> f64 {
    let xx: f64 = idx.clone().map(|i| x[i] * x[i]).sum();
    if xx == 0.0 {
        return 0.0;
    }
    let xy: f64 = idx.map(|i| x[i] * y[i]).sum();
    xy / xx
}

fn masked_values(mask: &PixelMask) -> Vec<usize> {
    mask.indices().flat_map(|p| [3 * p, 3 * p + 1, 3 * p + 2]).collect()
}

/// Mean squared error after scaling `x` by `<x,y>/<x,x>`.
pub fn si_mse(x: &LinearImage, y: &LinearImage, mask: &PixelMask) -> Result<f64> {
    check(x, y, mask)?;
    let (xd, yd) = (x.data(), y.data());
    let idx = masked_values(mask);
    let alpha = fit_scale(xd, yd, idx.iter().copied());
    let n = idx.len() as f64;
    Ok(idx.iter().map(|&i| (alpha * xd[i] - yd[i]).powi(2)).sum::<f64>() / n)
}

pub fn mse(x: &LinearImage, y: &LinearImage, mask: &PixelMask) -> Result<f64> {
    check(x, y, mask)?;
    let (xd, yd) = (x.data(), y.data());
    let idx = masked_values(mask);
    let n = idx.len() as f64;
    Ok(idx.iter().map(|&i| (xd[i] - yd[i]).powi(2)).sum::<f64>() / n)
}

/// Local mean squared error: scale-invariant MSE over `20 x 20` windows at
/// stride 10, averaged over windows holding at least
/// [`LMSE_MIN_PIXELS`] masked pixels.
pub fn lmse(x: &LinearImage, y: &LinearImage, mask: &PixelMask) -> Result<f64> {
    check(x, y, mask)?;
    let (w, h) = x.dims();
    let (xd, yd) = (x.data(), y.data());
    let mut total = 0.0;
    let mut windows = 0usize;
    let starts = |len: usize| (0..).map(|k| k * LMSE_STRIDE).take_while(move |s| s + LMSE_WINDOW <= len);
    for y0 in starts(h) {
        for x0 in starts(w) {
            let pixels: Vec<usize> = (y0..y0 + LMSE_WINDOW)
                .flat_map(|yy| (x0..x0 + LMSE_WINDOW).map(move |xx| yy * w + xx))
                .filter(|&p| mask.bits()[p])
                .collect();
            if pixels.len() < LMSE_MIN_PIXELS {
                continue;
            }
            let idx = pixels.iter().flat_map(|p| [3 * p, 3 * p + 1, 3 * p + 2]);
            let alpha = fit_scale(xd, yd, idx.clone());
            total += idx.map(|i| (alpha * xd[i] - yd[i]).powi(2)).sum::<f64>() / (pixels.len() * 3) as f64;
            windows += 1;
        }
    }
    if windows == 0 {
        return Err(Error::Domain(format!(
            "no {LMSE_WINDOW}x{LMSE_WINDOW} window holds {LMSE_MIN_PIXELS} masked pixels"
        )));
    }
    Ok(total / windows as f64)
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter over the fully-inside window positions.
/// Output is `(w - 10) x (h - 10)`, row-major.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Structural dissimilarity `(1 - SSIM) / 2` with an `11 x 11` Gaussian
/// window (sigma 1.5) and dynamic range 1. SSIM is averaged over window
/// positions that lie fully inside the image and are centered on a masked
/// pixel, then over channels.
pub fn dssim(x: &LinearImage, y: &LinearImage, mask: &PixelMask) -> Result<f64> {
    check(x, y, mask)?;
    let (w, h) = x.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Domain(format!(
            "image {w}x{h} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let r = SSIM_WINDOW / 2;
    let ow = w - SSIM_WINDOW + 1;
    let centers: Vec<usize> = (0..h - 2 * r)
        .flat_map(|oy| (0..ow).map(move |ox| (ox, oy)))
        .filter(|&(ox, oy)| mask.get(ox + r, oy + r))
        .map(|(ox, oy)| oy * ow + ox)
        .collect();
    if centers.is_empty() {
        return Err(Error::Domain("no masked pixel has a full SSIM window".into()));
    }
    let k = gaussian_kernel();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut ssim = 0.0;
    for c in 0..3 {
        let xp: Vec<f64> = x.data().iter().skip(c).step_by(3).copied().collect();
        let yp: Vec<f64> = y.data().iter().skip(c).step_by(3).copied().collect();
        let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<f64>>();
        let mx = filter_valid(&xp, w, h, &k);
        let my = filter_valid(&yp, w, h, &k);
        let mxx = filter_valid(&prod(&xp, &xp), w, h, &k);
        let myy = filter_valid(&prod(&yp, &yp), w, h, &k);
        let mxy = filter_valid(&prod(&xp, &yp), w, h, &k);
        let sum: f64 = centers
            .iter()
            .map(|&i| {
                let (ux, uy) = (mx[i], my[i]);
                let vx = mxx[i] - ux * ux;
                let vy = myy[i] - uy * uy;
                let cxy = mxy[i] - ux * uy;
                ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
            })
            .sum();
        ssim += sum / centers.len() as f64;
    }
    Ok(((1.0 - ssim / 3.0) / 2.0).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub si_mse: f64,
    pub mse: f64,
    pub dssim: f64,
    pub lmse: f64,
}

impl LayerMetrics {
    pub fn compute(x: &LinearImage, y: &LinearImage, mask: &PixelMask) -> Result<Self> {
        Ok(Self {
            si_mse: si_mse(x, y, mask)?,
            mse: mse(x, y, mask)?,
            dssim: dssim(x, y, mask)?,
            lmse: lmse(x, y, mask)?,
        })
    }

    fn mean(items: &[LayerMetrics]) -> Self {
        let n = items.len() as f64;
        let avg = |f: fn(&LayerMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self {
            si_mse: avg(|m| m.si_mse),
            mse: avg(|m| m.mse),
            dssim: avg(|m| m.dssim),
            lmse: avg(|m| m.lmse),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub highlight: LayerMetrics,
    pub albedo: LayerMetrics,
    pub shading: LayerMetrics,
    pub diffuse: LayerMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    pub mean: ImageMetrics,
}

/// Scores every layer of every view against its ground truth.
pub fn evaluate(result: &[LayerDecomposition], truth: &[LayerDecomposition], mask: &PixelMask) -> Result<MetricReport> {
    if result.len() != truth.len() || result.is_empty() {
        return Err(Error::Shape(format!(
            "{} decompositions against {} ground-truth views",
            result.len(),
            truth.len()
        )));
    }
    let images = result
        .iter()
        .zip(truth)
        .map(|(r, t)| {
            Ok(ImageMetrics {
                highlight: LayerMetrics::compute(&r.highlight, &t.highlight, mask)?,
                albedo: LayerMetrics::compute(&r.albedo, &t.albedo, mask)?,
                shading: LayerMetrics::compute(&r.shading, &t.shading, mask)?,
                diffuse: LayerMetrics::compute(&r.diffuse, &t.diffuse, mask)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pick = |f: fn(&ImageMetrics) -> LayerMetrics| LayerMetrics::mean(&images.iter().map(f).collect::<Vec<_>>());
    let mean = ImageMetrics {
        highlight: pick(|m| m.highlight),
        albedo: pick(|m| m.albedo),
        shading: pick(|m| m.shading),
        diffuse: pick(|m| m.diffuse),
    };
    Ok(MetricReport { images, mean })
}
