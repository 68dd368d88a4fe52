//! Histograms of oriented gradients, plus the rendered-image form used as a
//! model input channel.
//!
//! Pipeline: central-difference gradients (replicated edges), unsigned
//! orientation in [0, 180) split into `n_bins` with magnitude votes linearly
//! interpolated between the two nearest bin centers (wrapping), square cells,
//! and L2 block normalization over `block_cells` x `block_cells` cell groups
//! with stride one cell: v -> v / sqrt(|v|^2 + eps^2), eps = 1e-6.
//!
//! The rendered map draws, for every cell and bin, a line through the cell
//! center along the edge direction (bin center angle + 90 degrees); a pixel
//! lights up when its center lies within half a pixel of the line. Line
//! intensity is the cell's bin value averaged over every block containing
//! the cell, and the finished map is rescaled by its maximum into [0, 1].

use crate::image::GrayImage;
use crate::tensor::TensorError;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const HOG_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HogConfig {
    /// Square cell side in pixels.
    pub cell_size: usize,
    /// Orientation bins over the unsigned 180-degree range.
    pub n_bins: usize,
    /// Block side, in cells.
    pub block_cells: usize,
}

impl Default for HogConfig {
    fn default() -> Self {
        HogConfig { cell_size: 8, n_bins: 9, block_cells: 2 }
    }
}

impl HogConfig {
    fn validate(&self, img: &GrayImage) -> Result<(usize, usize), TensorError> {
        if self.cell_size == 0 || self.n_bins < 2 || self.block_cells == 0 {
            return Err(TensorError::InvalidArgument(format!(
                "degenerate HOG config: cell {}, bins {}, block {}",
                self.cell_size, self.n_bins, self.block_cells
            )));
        }
        if img.height % self.cell_size != 0 || img.width % self.cell_size != 0 {
            return Err(TensorError::Shape(format!(
                "image {}x{} is not divisible into {}-pixel cells",
                img.height, img.width, self.cell_size
            )));
        }
        let cy = img.height / self.cell_size;
        let cx = img.width / self.cell_size;
        if cy < self.block_cells || cx < self.block_cells {
            return Err(TensorError::Shape(format!(
                "{cy}x{cx} cell grid cannot hold {0}x{0} blocks",
                self.block_cells
            )));
        }
        Ok((cy, cx))
    }
}

/// Central-difference gradient pair at one pixel, edges replicated.
#[inline]
pub fn gradient_at(img: &GrayImage, y: usize, x: usize) -> (f64, f64) {
    let (yi, xi) = (y as isize, x as isize);
    let gx = img.get_replicated(yi, xi + 1) - img.get_replicated(yi, xi - 1);
    let gy = img.get_replicated(yi + 1, xi) - img.get_replicated(yi - 1, xi);
    (gx, gy)
}

/// Magnitude vote split between the two bin centers bracketing `theta`.
/// Returns ((bin, weight), (bin, weight)).
#[inline]
pub fn interpolate_vote(
    gx: f64,
    gy: f64,
    n_bins: usize,
) -> (f64, (usize, f64), (usize, f64)) {
    let mag = (gx * gx + gy * gy).sqrt();
    let mut theta = gy.atan2(gx);
    if theta < 0.0 {
        theta += PI;
    }
    // atan2 can return exactly pi; the voting below wraps it to the same
    // bins as theta = 0.
    let bin_width = PI / n_bins as f64;
    let pos = theta / bin_width - 0.5;
    let f = pos.floor();
    let frac = pos - f;
    let b0 = (((f as isize) % n_bins as isize + n_bins as isize) % n_bins as isize) as usize;
    let b1 = (b0 + 1) % n_bins;
    (mag, (b0, 1.0 - frac), (b1, frac))
}

/// Per-cell orientation histograms, cells row-major, bins contiguous.
pub fn cell_histograms(img: &GrayImage, cfg: &HogConfig) -> Result<Vec<f64>, TensorError> {
    let (cells_y, cells_x) = cfg.validate(img)?;
    let mut hist = vec![0.0; cells_y * cells_x * cfg.n_bins];
    for y in 0..img.height {
        for x in 0..img.width {
            let (gx, gy) = gradient_at(img, y, x);
            let (mag, (b0, w0), (b1, w1)) = interpolate_vote(gx, gy, cfg.n_bins);
            let cell = (y / cfg.cell_size) * cells_x + x / cfg.cell_size;
            hist[cell * cfg.n_bins + b0] += mag * w0;
            hist[cell * cfg.n_bins + b1] += mag * w1;
        }
    }
    Ok(hist)
}

/// Block-normalized feature vector. Blocks slide one cell at a time,
/// row-major; within a block, cells are row-major and bins contiguous.
/// A 64x64 image with default parameters yields 7*7 blocks * 4 cells *
/// 9 bins = 1764 values.
pub fn hog_features(img: &GrayImage, cfg: &HogConfig) -> Result<Vec<f64>, TensorError> {
    let (cells_y, cells_x) = cfg.validate(img)?;
    let hist = cell_histograms(img, cfg)?;
    let bc = cfg.block_cells;
    let blocks_y = cells_y - bc + 1;
    let blocks_x = cells_x - bc + 1;
    let block_len = bc * bc * cfg.n_bins;
    let mut features = Vec::with_capacity(blocks_y * blocks_x * block_len);
    for by in 0..blocks_y {
        for bx in 0..blocks_x {
            let start = features.len();
            for dy in 0..bc {
                for dx in 0..bc {
                    let cell = (by + dy) * cells_x + (bx + dx);
                    features
                        .extend_from_slice(&hist[cell * cfg.n_bins..(cell + 1) * cfg.n_bins]);
                }
            }
            let mut sumsq = 0.0;
            for v in &features[start..] {
                sumsq += v * v;
            }
            let norm = (sumsq + HOG_NORM_EPS * HOG_NORM_EPS).sqrt();
            for v in &mut features[start..] {
                *v /= norm;
            }
        }
    }
    Ok(features)
}

/// Per-cell bin values for rendering: each cell's normalized histogram
/// averaged over every block that contains the cell, blocks visited
/// row-major.
pub fn render_cell_values(img: &GrayImage, cfg: &HogConfig) -> Result<Vec<f64>, TensorError> {
    let (cells_y, cells_x) = cfg.validate(img)?;
    let features = hog_features(img, cfg)?;
    let bc = cfg.block_cells;
    let blocks_x = cells_x - bc + 1;
    let blocks_y = cells_y - bc + 1;
    let mut sums = vec![0.0; cells_y * cells_x * cfg.n_bins];
    let mut counts = vec![0u32; cells_y * cells_x];
    let block_len = bc * bc * cfg.n_bins;
    for by in 0..blocks_y {
        for bx in 0..blocks_x {
            let base = (by * blocks_x + bx) * block_len;
            for dy in 0..bc {
                for dx in 0..bc {
                    let cell = (by + dy) * cells_x + (bx + dx);
                    let src = base + (dy * bc + dx) * cfg.n_bins;
                    for b in 0..cfg.n_bins {
                        sums[cell * cfg.n_bins + b] += features[src + b];
                    }
                    counts[cell] += 1;
                }
            }
        }
    }
    for cell in 0..cells_y * cells_x {
        let c = counts[cell] as f64;
        for b in 0..cfg.n_bins {
            sums[cell * cfg.n_bins + b] /= c;
        }
    }
    Ok(sums)
}

/// Rendered HOG image: oriented line kernels per cell, max-rescaled to [0, 1].
pub fn hog_map(img: &GrayImage, cfg: &HogConfig) -> Result<GrayImage, TensorError> {
    let (cells_y, cells_x) = cfg.validate(img)?;
    let values = render_cell_values(img, cfg)?;
    let cs = cfg.cell_size;
    let center = (cs as f64 - 1.0) / 2.0;
    let bin_width = PI / cfg.n_bins as f64;
    let mut out = GrayImage::zeros(img.height, img.width);
    for cy in 0..cells_y {
        for cx in 0..cells_x {
            for b in 0..cfg.n_bins {
                let v = values[(cy * cells_x + cx) * cfg.n_bins + b];
                if v == 0.0 {
                    continue;
                }
                // Edge direction: bin-center gradient angle rotated 90 deg.
                let phi = (b as f64 + 0.5) * bin_width + PI / 2.0;
                let (dx, dy) = (phi.cos(), phi.sin());
                for py in 0..cs {
                    for px in 0..cs {
                        let vx = px as f64 - center;
                        let vy = py as f64 - center;
                        // Distance from pixel center to the line through the
                        // cell center with direction (dx, dy).
                        let dist = (vx * dy - vy * dx).abs();
                        if dist <= 0.5 {
                            let gy = cy * cs + py;
                            let gx = cx * cs + px;
                            out.pixels[gy * img.width + gx] += v;
                        }
                    }
                }
            }
        }
    }
    let max = out.pixels.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        for p in &mut out.pixels {
            *p /= max;
        }
    }
    Ok(out)
}
