//! Linear-radiance image containers, the additive formation model
//! `I = H + A * S`, chromaticity maps and masking.
//!
//! Every raster in this crate is stored as interleaved RGB `f64` in
//! row-major order. Gradient rasters share the same layout but may be
//! negative, so they are passed around as plain slices rather than
//! [`LinearImage`].

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};

/// Gamma assumed for 8/16-bit inputs.
pub const DEFAULT_GAMMA: f64 = 2.2;
/// Below this channel sum a pixel is treated as black by [`chromaticity`].
pub const CHROMA_EPS: f64 = 1e-6;
/// Lower clamp on shading when dividing it out.
pub const SHADING_EPS: f64 = 1e-4;
/// Tolerance on `H + A * S = I` for a valid decomposition.
pub const RECONSTRUCTION_TOLERANCE: f64 = 1e-5;
/// Rounds of multiplicative median-chromaticity matching.
pub(crate) const MATCH_ITERATIONS: usize = 3;

/// An RGB raster in linear radiance. Values are finite and non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl LinearImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{}x{} RGB image needs {} values, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Domain(format!(
                "image values must be finite and non-negative, found {v}"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds an image without validating the values. Callers guarantee
    /// the invariants by construction.
    pub(crate) fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height * 3);
        debug_assert!(data.iter().all(|v| v.is_finite() && *v >= 0.0));
        Self {
            width,
            height,
            data,
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::from_raw(width, height, vec![0.0; width * height * 3])
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        Self::from_fn(width, height, |_, _| rgb)
    }

    /// Builds an image from a per-pixel closure called in row-major order.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// RGB triple of the pixel with flat row-major index `idx`.
    pub fn pixel(&self, idx: usize) -> [f64; 3] {
        let o = idx * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixel(y * self.width + x)
    }

    /// Multiplies every value by a non-negative factor.
    pub fn scaled(&self, alpha: f64) -> Result<Self> {
        Self::new(
            self.width,
            self.height,
            self.data.iter().map(|v| v * alpha).collect(),
        )
    }

    /// Rec. 709 luminance per pixel.
    pub fn luminance(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| luminance(p[0], p[1], p[2]))
            .collect()
    }

    /// Per-pixel channel mean, used when a grayscale shading is wanted.
    pub fn channel_mean(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| (p[0] + p[1] + p[2]) / 3.0)
            .collect()
    }

    /// Mean over the masked pixels and all channels.
    pub fn masked_mean(&self, mask: &PixelMask) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for idx in mask.indices() {
            sum += self.data[idx * 3] + self.data[idx * 3 + 1] + self.data[idx * 3 + 2];
            count += 3;
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    /// Affine remap of all values onto `[0, 1]`, for display only.
    pub fn range_normalized(&self) -> Self {
        let (lo, hi) = self
            .data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(*v), hi.max(*v))
            });
        let span = hi - lo;
        let data = if span > 0.0 {
            self.data.iter().map(|v| (v - lo) / span).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Self::from_raw(self.width, self.height, data)
    }

    pub(crate) fn check_dims(&self, other: &LinearImage, what: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

pub(crate) fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.2126 * r + 0.7152 * g + 0.0722 * b
}

/// Foreground mask; one flag per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl PixelMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Shape(format!(
                "{}x{} mask needs {} flags, got {}",
                width,
                height,
                width * height,
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// Flat indices of foreground pixels in row-major order.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.then_some(i))
    }

    pub fn intersect(&self, other: &PixelMask) -> Result<Self> {
        if self.dims() != other.dims() {
            return Err(Error::Shape("mask intersection of different sizes".into()));
        }
        Ok(Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect(),
        })
    }

    pub(crate) fn check_image(&self, img: &LinearImage) -> Result<()> {
        if self.dims() != img.dims() {
            return Err(Error::Shape(format!(
                "mask is {}x{} but image is {}x{}",
                self.width,
                self.height,
                img.width(),
                img.height()
            )));
        }
        Ok(())
    }

    pub(crate) fn require_nonempty(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Domain("mask selects no pixels".into()));
        }
        Ok(())
    }
}

/// Views of one object with a shared foreground mask.
#[derive(Debug, Clone)]
pub struct ImageSet {
    images: Vec<LinearImage>,
    reference_index: usize,
    mask: PixelMask,
}

impl ImageSet {
    pub fn new(images: Vec<LinearImage>, reference_index: usize, mask: PixelMask) -> Result<Self> {
        if images.len() < 2 {
            return Err(Error::Precondition(format!(
                "an image set needs at least 2 views, got {}",
                images.len()
            )));
        }
        if reference_index >= images.len() {
            return Err(Error::Precondition(format!(
                "reference index {reference_index} out of range for {} views",
                images.len()
            )));
        }
        for img in &images[1..] {
            images[0].check_dims(img, "image set views differ in size")?;
        }
        mask.check_image(&images[0])?;
        Ok(Self {
            images,
            reference_index,
            mask,
        })
    }

    pub fn images(&self) -> &[LinearImage] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn reference_index(&self) -> usize {
        self.reference_index
    }

    pub fn reference(&self) -> &LinearImage {
        &self.images[self.reference_index]
    }

    pub fn mask(&self) -> &PixelMask {
        &self.mask
    }

    pub fn dims(&self) -> (usize, usize) {
        self.images[0].dims()
    }
}

/// Highlight, albedo, shading and diffuse layers of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDecomposition {
    pub highlight: LinearImage,
    pub albedo: LinearImage,
    pub shading: LinearImage,
    pub diffuse: LinearImage,
}

impl LayerDecomposition {
    /// Assembles the layers, deriving the diffuse layer as `A * S`.
    pub fn new(highlight: LinearImage, albedo: LinearImage, shading: LinearImage) -> Result<Self> {
        highlight.check_dims(&albedo, "highlight vs albedo")?;
        highlight.check_dims(&shading, "highlight vs shading")?;
        let diffuse: Vec<f64> = albedo
            .data()
            .iter()
            .zip(shading.data())
            .map(|(a, s)| a * s)
            .collect();
        let diffuse = LinearImage::from_raw(albedo.width(), albedo.height(), diffuse);
        Ok(Self {
            highlight,
            albedo,
            shading,
            diffuse,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.highlight.dims()
    }

    /// Largest violations of `I_d = A * S` (everywhere) and `H + I_d = I`
    /// (on masked pixels).
    pub fn reconstruction_errors(&self, input: &LinearImage, mask: &PixelMask) -> Result<(f64, f64)> {
        self.highlight.check_dims(input, "decomposition vs input")?;
        mask.check_image(input)?;
        let product = self
            .albedo
            .data()
            .iter()
            .zip(self.shading.data())
            .zip(self.diffuse.data())
            .map(|((a, s), d)| (a * s - d).abs())
            .fold(0.0, f64::max);
        let mut sum = 0.0f64;
        for idx in mask.indices() {
            for c in 0..3 {
                let o = idx * 3 + c;
                let r = self.highlight.data()[o] + self.diffuse.data()[o] - input.data()[o];
                sum = sum.max(r.abs());
            }
        }
        Ok((product, sum))
    }
}

/// Per-pixel `(Ch_r, Ch_g)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ChromaticityMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ChromaticityMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Interleaved `(Ch_r, Ch_g)` values, two per pixel.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> (f64, f64) {
        let o = (y * self.width + x) * 2;
        (self.data[o], self.data[o + 1])
    }
}

/// Loads an RGB(A) PNG and linearizes it as `c^gamma`. Alpha is ignored.
pub fn load_image(path: impl AsRef<Path>, gamma: f64) -> Result<LinearImage> {
    let path = path.as_ref();
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Domain(format!("gamma must be positive, got {gamma}")));
    }
    let decoded = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    let (width, height) = (decoded.width() as usize, decoded.height() as usize);
    let linear = |v: f64| v.powf(gamma);
    let data: Vec<f64> = match decoded {
        DynamicImage::ImageRgb8(img) => img.pixels().flat_map(|p| p.0).map(|v| linear(v as f64 / 255.0)).collect(),
        DynamicImage::ImageRgba8(img) => img
            .pixels()
            .flat_map(|p| [p.0[0], p.0[1], p.0[2]])
            .map(|v| linear(v as f64 / 255.0))
            .collect(),
        DynamicImage::ImageRgb16(img) => img.pixels().flat_map(|p| p.0).map(|v| linear(v as f64 / 65535.0)).collect(),
        DynamicImage::ImageRgba16(img) => img
            .pixels()
            .flat_map(|p| [p.0[0], p.0[1], p.0[2]])
            .map(|v| linear(v as f64 / 65535.0))
            .collect(),
        other => {
            return Err(Error::Format(format!(
                "{}: expected 8- or 16-bit RGB, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    Ok(LinearImage::from_raw(width, height, data))
}

/// Encodes `clamp(v, 0, 1)^(1/gamma)` into an 8-bit RGB PNG.
pub fn save_image(img: &LinearImage, path: impl AsRef<Path>, gamma: f64) -> Result<()> {
    let path = path.as_ref();
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Domain(format!("gamma must be positive, got {gamma}")));
    }
    let inv = 1.0 / gamma;
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0).powf(inv) * 255.0).round() as u8)
        .collect();
    let out = RgbImage::from_raw(img.width() as u32, img.height() as u32, bytes)
        .expect("buffer length matches dimensions");
    out.save_with_format(path, ImageFormat::Png)
        .map_err(|e| write_error(path, e))
}

/// Reads a mask PNG; luminance above 127 is foreground.
pub fn load_mask(path: impl AsRef<Path>) -> Result<PixelMask> {
    let path = path.as_ref();
    let decoded = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    let luma = decoded.to_luma8();
    let (w, h) = (luma.width() as usize, luma.height() as usize);
    PixelMask::new(w, h, luma.pixels().map(|p| p.0[0] > 127).collect())
}

pub fn save_mask(mask: &PixelMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = mask.bits().iter().map(|b| if *b { 255 } else { 0 }).collect();
    let out = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, bytes)
        .expect("buffer length matches dimensions");
    out.save_with_format(path, ImageFormat::Png)
        .map_err(|e| write_error(path, e))
}

fn write_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Forms `H + A * S` elementwise.
pub fn compose(d: &LayerDecomposition) -> Result<LinearImage> {
    d.highlight.check_dims(&d.albedo, "highlight vs albedo")?;
    d.highlight.check_dims(&d.shading, "highlight vs shading")?;
    let data = d
        .highlight
        .data()
        .iter()
        .zip(d.albedo.data())
        .zip(d.shading.data())
        .map(|((h, a), s)| h + a * s)
        .collect();
    Ok(LinearImage::from_raw(d.highlight.width(), d.highlight.height(), data))
}

#[inline]
pub(crate) fn chroma_of(r: f64, g: f64, b: f64, eps: f64) -> (f64, f64) {
    let sum = r + g + b;
    if sum > eps {
        (r / sum, g / sum)
    } else {
        (1.0 / 3.0, 1.0 / 3.0)
    }
}

/// Intensity-normalized `(R, G) / (R + G + B)`; near-black pixels map to
/// `(1/3, 1/3)`.
pub fn chromaticity(img: &LinearImage, eps: f64) -> ChromaticityMap {
    let data = img
        .data()
        .chunks_exact(3)
        .flat_map(|p| {
            let (r, g) = chroma_of(p[0], p[1], p[2], eps);
            [r, g]
        })
        .collect();
    ChromaticityMap {
        width: img.width(),
        height: img.height(),
        data,
    }
}

/// Rescales the channels of `img` so that its masked median chromaticity
/// matches that of `reference`.
pub fn median_chroma_match(
    img: &LinearImage,
    reference: &LinearImage,
    mask: &PixelMask,
) -> Result<LinearImage> {
    img.check_dims(reference, "median chromaticity matching")?;
    mask.check_image(img)?;
    mask.require_nonempty()?;
    let idx: Vec<usize> = mask.indices().collect();
    let target = masked_median_chroma(reference.data(), [1.0; 3], &idx);
    let tape = match_forward(img.data(), &target, &idx);
    let s = tape.final_scale();
    let data = img
        .data()
        .chunks_exact(3)
        .flat_map(|p| [p[0] * s[0], p[1] * s[1], p[2] * s[2]])
        .collect();
    Ok(LinearImage::from_raw(img.width(), img.height(), data))
}

/// `A = I_d / max(S, eps_s)` elementwise.
pub fn albedo_from_shading(diffuse: &LinearImage, shading: &LinearImage, eps_s: f64) -> Result<LinearImage> {
    diffuse.check_dims(shading, "albedo from shading")?;
    let data = diffuse
        .data()
        .iter()
        .zip(shading.data())
        .map(|(d, s)| d / s.max(eps_s))
        .collect();
    Ok(LinearImage::from_raw(diffuse.width(), diffuse.height(), data))
}

/// Masked lower-median chromaticity of a channel-scaled raster, with the
/// pixels the two medians were read from.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ChromaMedian {
    pub value: [f64; 2],
    pub pixel: [usize; 2],
}

impl ChromaMedian {
    /// `(m_r, m_g, m_b)` with `m_b = 1 - m_r - m_g`.
    pub fn triple(&self) -> [f64; 3] {
        [self.value[0], self.value[1], 1.0 - self.value[0] - self.value[1]]
    }
}

pub(crate) fn masked_median_chroma(data: &[f64], scale: [f64; 3], idx: &[usize]) -> ChromaMedian {
    debug_assert!(!idx.is_empty());
    let mut rs = Vec::with_capacity(idx.len());
    let mut gs = Vec::with_capacity(idx.len());
    for &p in idx {
        let o = p * 3;
        let (r, g) = chroma_of(
            data[o] * scale[0],
            data[o + 1] * scale[1],
            data[o + 2] * scale[2],
            CHROMA_EPS,
        );
        rs.push((r, p));
        gs.push((g, p));
    }
    let k = (idx.len() - 1) / 2;
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    let (_, mr, _) = rs.select_nth_unstable_by(k, cmp);
    let (_, mg, _) = gs.select_nth_unstable_by(k, cmp);
    ChromaMedian {
        value: [mr.0, mg.0],
        pixel: [mr.1, mg.1],
    }
}

/// Record of the iterative channel-scale matching, kept for backprop.
#[derive(Debug, Clone)]
pub(crate) struct MatchTape {
    /// `scales[k]` is the scale before round `k`; the last entry is final.
    pub scales: Vec<[f64; 3]>,
    pub medians: Vec<ChromaMedian>,
}

impl MatchTape {
    pub fn final_scale(&self) -> [f64; 3] {
        *self.scales.last().expect("at least the initial scale")
    }
}

/// Each round multiplies channel `c` by `target_c / max(current_c, eps)`.
/// With a single median pixel one round is exact; a few more rounds absorb
/// the median pixel changing between channels.
pub(crate) fn match_forward(data: &[f64], target: &ChromaMedian, idx: &[usize]) -> MatchTape {
    let goal = target.triple();
    let mut scales = vec![[1.0; 3]];
    let mut medians = Vec::with_capacity(MATCH_ITERATIONS);
    for _ in 0..MATCH_ITERATIONS {
        let s = *scales.last().unwrap();
        let med = masked_median_chroma(data, s, idx);
        let m = med.triple();
        let mut next = [0.0; 3];
        for c in 0..3 {
            next[c] = s[c] * goal[c] / m[c].max(CHROMA_EPS);
        }
        medians.push(med);
        scales.push(next);
    }
    MatchTape { scales, medians }
}

/// Pushes a gradient on `(Ch_r, Ch_g)` of pixel `p` of `data * scale` back
/// onto the raw pixel values and, optionally, the scale.
pub(crate) fn chroma_backward_at(
    data: &[f64],
    p: usize,
    scale: [f64; 3],
    g: [f64; 2],
    grad_data: &mut [f64],
    grad_scale: Option<&mut [f64; 3]>,
) {
    let o = p * 3;
    let x = [data[o] * scale[0], data[o + 1] * scale[1], data[o + 2] * scale[2]];
    let sum = x[0] + x[1] + x[2];
    if sum <= CHROMA_EPS {
        return;
    }
    let (cr, cg) = (x[0] / sum, x[1] / sum);
    let common = g[0] * cr + g[1] * cg;
    let gx = [
        (g[0] - common) / sum,
        (g[1] - common) / sum,
        (-common) / sum,
    ];
    for c in 0..3 {
        grad_data[o + c] += gx[c] * scale[c];
    }
    if let Some(gs) = grad_scale {
        for c in 0..3 {
            gs[c] += gx[c] * data[o + c];
        }
    }
}

/// Backprop through [`match_forward`]. `grad_final` is the gradient on the
/// final scale; pixel gradients are accumulated into `grad_data` and the
/// gradient on the target medians `(m_r, m_g)` is returned.
pub(crate) fn match_backward(
    tape: &MatchTape,
    data: &[f64],
    target: &ChromaMedian,
    grad_final: [f64; 3],
    grad_data: &mut [f64],
) -> [f64; 2] {
    let goal = target.triple();
    let mut gs = grad_final;
    let mut g_goal = [0.0; 3];
    for k in (0..tape.medians.len()).rev() {
        let s = tape.scales[k];
        let med = &tape.medians[k];
        let m = med.triple();
        let mut g_prev = [0.0; 3];
        let mut g_m = [0.0; 3];
        for c in 0..3 {
            let denom = m[c].max(CHROMA_EPS);
            g_prev[c] += gs[c] * goal[c] / denom;
            g_goal[c] += gs[c] * s[c] / denom;
            if m[c] > CHROMA_EPS {
                g_m[c] = -gs[c] * s[c] * goal[c] / (denom * denom);
            }
        }
        // m_b = 1 - m_r - m_g
        let g_r = g_m[0] - g_m[2];
        let g_g = g_m[1] - g_m[2];
        chroma_backward_at(data, med.pixel[0], s, [g_r, 0.0], grad_data, Some(&mut g_prev));
        chroma_backward_at(data, med.pixel[1], s, [0.0, g_g], grad_data, Some(&mut g_prev));
        gs = g_prev;
    }
    [g_goal[0] - g_goal[2], g_goal[1] - g_goal[2]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_image(w: usize, h: usize, seed: u64) -> LinearImage {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        LinearImage::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap()
    }

    fn masked_median_triple(img: &LinearImage, mask: &PixelMask) -> [f64; 3] {
        let idx: Vec<usize> = mask.indices().collect();
        masked_median_chroma(img.data(), [1.0; 3], &idx).triple()
    }

    #[test]
    fn rejects_negative_nan_and_bad_length() {
        assert!(LinearImage::new(1, 1, vec![0.0, -1.0, 0.0]).is_err());
        assert!(LinearImage::new(1, 1, vec![0.0, f64::NAN, 0.0]).is_err());
        assert!(matches!(
            LinearImage::new(2, 1, vec![0.0; 3]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn gamma_endpoints_and_midpoint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("px.png");
        RgbImage::from_raw(3, 1, vec![255, 255, 255, 0, 0, 0, 128, 128, 128])
            .unwrap()
            .save(&path)
            .unwrap();
        let img = load_image(&path, DEFAULT_GAMMA).unwrap();
        assert_eq!(img.pixel(0), [1.0; 3]);
        assert_eq!(img.pixel(1), [0.0; 3]);
        // (128/255)^2.2 = 0.21951971807... (mpmath, 30 digits)
        assert!((img.pixel(2)[0] - 0.219_519_718_074_868).abs() < 1e-12);
    }

    #[test]
    fn alpha_is_ignored_and_gray_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let rgba = dir.path().join("rgba.png");
        image::RgbaImage::from_raw(1, 1, vec![255, 0, 255, 7])
            .unwrap()
            .save(&rgba)
            .unwrap();
        assert_eq!(load_image(&rgba, 2.2).unwrap().pixel(0), [1.0, 0.0, 1.0]);

        let gray = dir.path().join("gray.png");
        GrayImage::from_raw(1, 1, vec![9]).unwrap().save(&gray).unwrap();
        assert!(matches!(load_image(&gray, 2.2), Err(Error::Format(_))));
        assert!(matches!(
            load_image(dir.path().join("missing.png"), 2.2),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn save_extremes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        save_image(&LinearImage::zeros(4, 3), &path, 2.2).unwrap();
        let raw = image::open(&path).unwrap().to_rgb8();
        assert!(raw.as_raw().iter().all(|v| *v == 0));
        save_image(&LinearImage::filled(4, 3, [1.0; 3]).unwrap(), &path, 2.2).unwrap();
        let raw = image::open(&path).unwrap().to_rgb8();
        assert!(raw.as_raw().iter().all(|v| *v == 255));
    }

    #[test]
    fn save_load_round_trip_within_one_code() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.png");
        let img = random_image(17, 9, 3);
        save_image(&img, &path, 2.2).unwrap();
        let back = load_image(&path, 2.2).unwrap();
        let worst = img
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a.powf(1.0 / 2.2) - b.powf(1.0 / 2.2)).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1.0 / 255.0, "worst {worst}");
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let err = save_image(&LinearImage::zeros(2, 2), "/nonexistent-dir/x.png", 2.2).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err:?}");
    }

    #[test]
    fn mask_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        GrayImage::from_raw(3, 1, vec![127, 128, 255]).unwrap().save(&path).unwrap();
        let m = load_mask(&path).unwrap();
        assert_eq!(m.bits(), &[false, true, true]);
        save_mask(&m, &path).unwrap();
        assert_eq!(load_mask(&path).unwrap(), m);
    }

    #[test]
    fn compose_identities() {
        let x = random_image(5, 4, 1);
        let ones = LinearImage::filled(5, 4, [1.0; 3]).unwrap();
        let zeros = LinearImage::zeros(5, 4);
        let d = LayerDecomposition::new(zeros.clone(), ones, x.clone()).unwrap();
        assert_eq!(compose(&d).unwrap(), x);
        let d = LayerDecomposition::new(x.clone(), zeros, random_image(5, 4, 2)).unwrap();
        assert_eq!(compose(&d).unwrap(), x);
        let bad = LayerDecomposition {
            highlight: LinearImage::zeros(2, 2),
            ..d
        };
        assert!(matches!(compose(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn chromaticity_conventions() {
        let img = LinearImage::new(3, 1, vec![0.4, 0.4, 0.4, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let ch = chromaticity(&img, CHROMA_EPS);
        let (r, g) = ch.get(0, 0);
        assert!((r - 1.0 / 3.0).abs() < 1e-15 && (g - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(ch.get(1, 0), (1.0, 0.0));
        assert_eq!(ch.get(2, 0), (1.0 / 3.0, 1.0 / 3.0));
    }

    #[test]
    fn chromaticity_is_intensity_invariant() {
        let img = random_image(8, 8, 4);
        let a = chromaticity(&img, CHROMA_EPS);
        let b = chromaticity(&img.scaled(4.0).unwrap(), CHROMA_EPS);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn median_match_identity_and_gray() {
        let img = random_image(9, 7, 5);
        let mask = PixelMask::full(9, 7);
        assert_eq!(median_chroma_match(&img, &img, &mask).unwrap(), img);

        let gray = LinearImage::from_fn(9, 7, |x, y| [(x + y) as f64 * 0.1 + 0.1; 3]).unwrap();
        let gray2 = gray.scaled(0.5).unwrap();
        let out = median_chroma_match(&gray, &gray2, &mask).unwrap();
        for (a, b) in out.data().iter().zip(gray.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn median_match_undoes_channel_gain() {
        let reference = random_image(16, 16, 6);
        let doubled = LinearImage::from_fn(16, 16, |x, y| {
            let p = reference.get(x, y);
            [2.0 * p[0], p[1], p[2]]
        })
        .unwrap();
        let mask = PixelMask::from_fn(16, 16, |x, y| (x + y) % 3 != 0);
        let out = median_chroma_match(&doubled, &reference, &mask).unwrap();
        let got = masked_median_triple(&out, &mask);
        let want = masked_median_triple(&reference, &mask);
        for c in 0..3 {
            assert!((got[c] - want[c]).abs() <= 1e-3, "{got:?} vs {want:?}");
        }
        // The match is a per-channel gain, so the output is close to the
        // reference up to one global factor.
        let alpha = out.data()[1] / reference.data()[1];
        for (a, b) in out.data().iter().zip(reference.data()) {
            assert!((a - alpha * b).abs() < 1e-3 * (1.0 + a.abs()), "{a} vs {}", alpha * b);
        }
    }

    #[test]
    fn median_match_rejects_empty_mask() {
        let img = random_image(4, 4, 7);
        let mask = PixelMask::from_fn(4, 4, |_, _| false);
        assert!(matches!(
            median_chroma_match(&img, &img, &mask),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn albedo_from_shading_cases() {
        let s = random_image(6, 5, 8);
        let ones = LinearImage::filled(6, 5, [1.0; 3]).unwrap();
        let d = random_image(6, 5, 9);
        assert_eq!(albedo_from_shading(&d, &ones, SHADING_EPS).unwrap(), d);
        let a = albedo_from_shading(&LinearImage::zeros(6, 5), &s, SHADING_EPS).unwrap();
        assert!(a.data().iter().all(|v| *v == 0.0));
        let s = LinearImage::from_fn(6, 5, |x, y| [0.2 + 0.01 * (x + y) as f64; 3]).unwrap();
        let a = albedo_from_shading(&s.scaled(2.0).unwrap(), &s, SHADING_EPS).unwrap();
        assert!(a.data().iter().all(|v| (v - 2.0).abs() < 1e-15));
    }

    #[test]
    fn albedo_then_compose_recovers_diffuse() {
        let d = random_image(7, 7, 10);
        let s = LinearImage::from_fn(7, 7, |x, _| [0.3 + 0.1 * x as f64; 3]).unwrap();
        let a = albedo_from_shading(&d, &s, SHADING_EPS).unwrap();
        let layers = LayerDecomposition::new(LinearImage::zeros(7, 7), a, s).unwrap();
        let back = compose(&layers).unwrap();
        for (x, y) in back.data().iter().zip(d.data()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn image_set_validation() {
        let a = random_image(4, 4, 1);
        let m = PixelMask::full(4, 4);
        assert!(matches!(
            ImageSet::new(vec![a.clone()], 0, m.clone()),
            Err(Error::Precondition(_))
        ));
        assert!(ImageSet::new(vec![a.clone(), a.clone()], 2, m.clone()).is_err());
        assert!(ImageSet::new(vec![a.clone(), random_image(5, 4, 2)], 0, m.clone()).is_err());
        assert!(ImageSet::new(vec![a.clone(), a], 1, m).is_ok());
    }

    /// The hand-written backprop through median matching agrees with
    /// central differences of the forward pass.
    #[test]
    fn match_backward_matches_finite_differences() {
        let img = random_image(6, 6, 11);
        let reference = random_image(6, 6, 12);
        let mask = PixelMask::full(6, 6);
        let idx: Vec<usize> = mask.indices().collect();
        // Objective: a fixed linear functional of the final scale.
        let w = [0.3, -1.1, 0.7];
        let objective = |data: &[f64], refd: &[f64]| {
            let target = masked_median_chroma(refd, [1.0; 3], &idx);
            let s = match_forward(data, &target, &idx).final_scale();
            w[0] * s[0] + w[1] * s[1] + w[2] * s[2]
        };
        let target = masked_median_chroma(reference.data(), [1.0; 3], &idx);
        let tape = match_forward(img.data(), &target, &idx);
        let mut g_img = vec![0.0; img.data().len()];
        let g_target = match_backward(&tape, img.data(), &target, w, &mut g_img);
        let mut g_ref = vec![0.0; img.data().len()];
        chroma_backward_at(reference.data(), target.pixel[0], [1.0; 3], [g_target[0], 0.0], &mut g_ref, None);
        chroma_backward_at(reference.data(), target.pixel[1], [1.0; 3], [0.0, g_target[1]], &mut g_ref, None);

        let h = 1e-6;
        for i in 0..img.data().len() {
            let mut plus = img.data().to_vec();
            plus[i] += h;
            let mut minus = img.data().to_vec();
            minus[i] -= h;
            let fd = (objective(&plus, reference.data()) - objective(&minus, reference.data())) / (2.0 * h);
            assert!((fd - g_img[i]).abs() < 1e-5 * (1.0 + fd.abs()), "img {i}: {fd} vs {}", g_img[i]);

            let mut plus = reference.data().to_vec();
            plus[i] += h;
            let mut minus = reference.data().to_vec();
            minus[i] -= h;
            let fd = (objective(img.data(), &plus) - objective(img.data(), &minus)) / (2.0 * h);
            assert!((fd - g_ref[i]).abs() < 1e-5 * (1.0 + fd.abs()), "ref {i}: {fd} vs {}", g_ref[i]);
        }
    }
}
