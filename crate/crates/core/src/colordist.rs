//! Misalignment-robust color-distribution representation.
//!
//! The image is tiled into a grid; inside every cell the masked pixel
//! values of each channel are sorted ascending and the sorted runs are
//! concatenated cell-major, then channel-major. Two views that are shifted
//! by a few pixels keep roughly the same per-cell value distributions even
//! though their pixel-to-pixel correspondence is lost.
//!
//! Away from value ties the transform is a fixed permutation, so its
//! Jacobian is the permutation matrix recorded in [`DistVector`] and
//! [`scatter_gradient`] applies its transpose.

use crate::error::{Error, Result};
use crate::image::{LinearImage, PixelMask};

/// Grid of `cells_x * cells_y` cells. Cell `k` along an axis of length `L`
/// spans `[floor(k L / cells), floor((k + 1) L / cells))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub cells_x: usize,
    pub cells_y: usize,
}

impl Default for GridSpec {
    /// 16 x 16 = 256 cells.
    fn default() -> Self {
        Self {
            cells_x: 16,
            cells_y: 16,
        }
    }
}

impl GridSpec {
    pub fn new(cells_x: usize, cells_y: usize) -> Result<Self> {
        if cells_x == 0 || cells_y == 0 {
            return Err(Error::Domain(format!(
                "grid needs at least one cell per axis, got {cells_x}x{cells_y}"
            )));
        }
        Ok(Self { cells_x, cells_y })
    }

    /// One cell per pixel, which turns the transform into a plain
    /// pixel-to-pixel vectorization.
    pub fn per_pixel(width: usize, height: usize) -> Self {
        Self {
            cells_x: width,
            cells_y: height,
        }
    }

    pub fn cell_count(&self) -> usize {
        self.cells_x * self.cells_y
    }

    /// Cell boundaries along one axis, `cells + 1` entries from 0 to `len`.
    pub fn boundaries(len: usize, cells: usize) -> Vec<usize> {
        (0..=cells).map(|k| k * len / cells).collect()
    }

    fn check(&self, width: usize, height: usize) -> Result<()> {
        if self.cells_x == 0 || self.cells_y == 0 {
            return Err(Error::Domain("grid has zero cells".into()));
        }
        if self.cells_x > width || self.cells_y > height {
            return Err(Error::Shape(format!(
                "{}x{} grid is finer than the {}x{} image",
                self.cells_x, self.cells_y, width, height
            )));
        }
        Ok(())
    }
}

/// One sorted run: the values of `channel` inside grid cell `cell`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Group {
    pub cell: usize,
    pub channel: usize,
    pub count: usize,
    pub offset: usize,
}

/// Sorted per-cell, per-channel values of one raster.
#[derive(Debug, Clone, PartialEq)]
pub struct DistVector {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub values: Vec<f64>,
    pub groups: Vec<Group>,
    /// Source pixel (flat row-major index) of every entry of `values`.
    pub permutation: Vec<usize>,
}

impl DistVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &DistVector) -> bool {
        self.groups == other.groups
    }

    /// Euclidean distance between the value lists of two vectors built with
    /// the same layout.
    pub fn distance(&self, other: &DistVector) -> Result<f64> {
        if !self.same_layout(other) {
            return Err(Error::Shape("distribution vectors have different layouts".into()));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }
}

/// Masked pixel indices of every non-empty cell, computed once per
/// (grid, mask) and reused for every image of a set.
#[derive(Debug, Clone)]
pub struct CellLayout {
    width: usize,
    height: usize,
    cells: Vec<(usize, Vec<usize>)>,
    masked: usize,
}

impl CellLayout {
    pub fn new(grid: GridSpec, mask: &PixelMask) -> Result<Self> {
        let (width, height) = mask.dims();
        grid.check(width, height)?;
        mask.require_nonempty()?;
        let xs = GridSpec::boundaries(width, grid.cells_x);
        let ys = GridSpec::boundaries(height, grid.cells_y);
        let mut cells = Vec::new();
        let mut masked = 0;
        for cy in 0..grid.cells_y {
            for cx in 0..grid.cells_x {
                let mut pixels = Vec::new();
                for y in ys[cy]..ys[cy + 1] {
                    for x in xs[cx]..xs[cx + 1] {
                        if mask.get(x, y) {
                            pixels.push(y * width + x);
                        }
                    }
                }
                if !pixels.is_empty() {
                    masked += pixels.len();
                    cells.push((cy * grid.cells_x + cx, pixels));
                }
            }
        }
        Ok(Self {
            width,
            height,
            cells,
            masked,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Number of non-empty cells.
    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    /// Pixel counts of the non-empty cells, in layout order.
    pub fn cell_sizes(&self) -> impl Iterator<Item = usize> + '_ {
        self.cells.iter().map(|(_, p)| p.len())
    }

    pub fn masked_pixels(&self) -> usize {
        self.masked
    }

    /// Length of the value vector for a raster with `channels` channels.
    pub fn value_len(&self, channels: usize) -> usize {
        self.masked * channels
    }

    /// Sorts an interleaved `channels`-channel raster. Sorting is stable,
    /// so ties keep row-major order.
    pub fn reorder(&self, data: &[f64], channels: usize) -> Result<DistVector> {
        if data.len() != self.width * self.height * channels {
            return Err(Error::Shape(format!(
                "raster has {} values, layout expects {}",
                data.len(),
                self.width * self.height * channels
            )));
        }
        let n = self.value_len(channels);
        let mut values = Vec::with_capacity(n);
        let mut permutation = Vec::with_capacity(n);
        let mut groups = Vec::with_capacity(self.cells.len() * channels);
        let mut scratch: Vec<(f64, usize)> = Vec::new();
        for (cell, pixels) in &self.cells {
            for channel in 0..channels {
                scratch.clear();
                scratch.extend(pixels.iter().map(|&p| (data[p * channels + channel], p)));
                scratch.sort_by(|a, b| a.0.total_cmp(&b.0));
                groups.push(Group {
                    cell: *cell,
                    channel,
                    count: scratch.len(),
                    offset: values.len(),
                });
                for (v, p) in &scratch {
                    values.push(*v);
                    permutation.push(*p);
                }
            }
        }
        Ok(DistVector {
            width: self.width,
            height: self.height,
            channels,
            values,
            groups,
            permutation,
        })
    }
}

/// Color-distribution vector of an RGB image.
pub fn reorder_transform(img: &LinearImage, grid: GridSpec, mask: &PixelMask) -> Result<DistVector> {
    mask.check_image(img)?;
    CellLayout::new(grid, mask)?.reorder(img.data(), 3)
}

/// Pulls a gradient on the sorted values back to the source raster.
/// Unmasked pixels receive zero.
pub fn scatter_gradient(g: &[f64], dv: &DistVector) -> Result<Vec<f64>> {
    let mut out = vec![0.0; dv.width * dv.height * dv.channels];
    scatter_into(g, dv, &mut out)?;
    Ok(out)
}

pub(crate) fn scatter_into(g: &[f64], dv: &DistVector, out: &mut [f64]) -> Result<()> {
    if g.len() != dv.values.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries, distribution vector has {}",
            g.len(),
            dv.values.len()
        )));
    }
    for group in &dv.groups {
        let range = group.offset..group.offset + group.count;
        for (gv, p) in g[range.clone()].iter().zip(&dv.permutation[range]) {
            out[p * dv.channels + group.channel] += gv;
        }
    }
    Ok(())
}
