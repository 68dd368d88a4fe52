//! Naive per-pixel reference descriptors.
//!
//! These recompute every quantity directly from the definitions — no
//! precomputed gradient planes, no cached masks, no shared histogram
//! buffers — while keeping the same accumulation order as the optimized
//! implementations, so results must match **bitwise**. They exist purely as
//! verification targets; the test suite compares them against the fast path
//! on random images.

use super::hog::{gradient_at, interpolate_vote, HogConfig, HOG_NORM_EPS};
use super::lbp::NEIGHBOR_OFFSETS;
use super::plgf::{mask_entry, PlgfConfig};
use crate::image::GrayImage;
use crate::tensor::TensorError;
use std::f64::consts::PI;

/// LBP by direct ring comparison at each pixel.
pub fn lbp_map_naive(img: &GrayImage) -> GrayImage {
    let mut out = GrayImage::zeros(img.height, img.width);
    for y in 0..img.height {
        for x in 0..img.width {
            let mut code = 0.0;
            let mut weight = 1.0;
            for (dy, dx) in NEIGHBOR_OFFSETS {
                let diff =
                    img.get_replicated(y as isize + dy, x as isize + dx) - img.get(y, x);
                if diff >= 0.0 {
                    code += weight;
                }
                weight *= 2.0;
            }
            out.set(y, x, code / 255.0);
        }
    }
    out
}

/// One cell's histogram, recomputing gradients pixel by pixel.
fn cell_hist_naive(img: &GrayImage, cfg: &HogConfig, cy: usize, cx: usize) -> Vec<f64> {
    let mut hist = vec![0.0; cfg.n_bins];
    for py in 0..cfg.cell_size {
        for px in 0..cfg.cell_size {
            let y = cy * cfg.cell_size + py;
            let x = cx * cfg.cell_size + px;
            let (gx, gy) = gradient_at(img, y, x);
            let (mag, (b0, w0), (b1, w1)) = interpolate_vote(gx, gy, cfg.n_bins);
            hist[b0] += mag * w0;
            hist[b1] += mag * w1;
        }
    }
    hist
}

/// Block-normalized HOG features assembled block by block from scratch.
pub fn hog_features_naive(img: &GrayImage, cfg: &HogConfig) -> Result<Vec<f64>, TensorError> {
    if img.height % cfg.cell_size != 0 || img.width % cfg.cell_size != 0 {
        return Err(TensorError::Shape("cell grid does not tile the image".into()));
    }
    let cells_y = img.height / cfg.cell_size;
    let cells_x = img.width / cfg.cell_size;
    let bc = cfg.block_cells;
    let mut features = Vec::new();
    for by in 0..=(cells_y - bc) {
        for bx in 0..=(cells_x - bc) {
            let mut block = Vec::with_capacity(bc * bc * cfg.n_bins);
            for dy in 0..bc {
                for dx in 0..bc {
                    block.extend(cell_hist_naive(img, cfg, by + dy, bx + dx));
                }
            }
            let mut sumsq = 0.0;
            for v in &block {
                sumsq += v * v;
            }
            let norm = (sumsq + HOG_NORM_EPS * HOG_NORM_EPS).sqrt();
            for v in &mut block {
                *v /= norm;
            }
            features.extend(block);
        }
    }
    Ok(features)
}

/// Rendered HOG map, recomputing the cell's averaged bin values and the line
/// kernel test for every output pixel.
pub fn hog_map_naive(img: &GrayImage, cfg: &HogConfig) -> Result<GrayImage, TensorError> {
    let features = hog_features_naive(img, cfg)?;
    let cells_y = img.height / cfg.cell_size;
    let cells_x = img.width / cfg.cell_size;
    let bc = cfg.block_cells;
    let blocks_y = cells_y - bc + 1;
    let blocks_x = cells_x - bc + 1;
    let block_len = bc * bc * cfg.n_bins;
    let cs = cfg.cell_size;
    let center = (cs as f64 - 1.0) / 2.0;
    let bin_width = PI / cfg.n_bins as f64;

    // Averaged normalized value of (cell, bin) over the blocks holding it,
    // blocks scanned row-major exactly like the fast path.
    let cell_value = |cy: usize, cx: usize, bin: usize| -> f64 {
        let mut sum = 0.0;
        let mut count = 0u32;
        for by in 0..blocks_y {
            for bx in 0..blocks_x {
                if cy >= by && cy < by + bc && cx >= bx && cx < bx + bc {
                    let (dy, dx) = (cy - by, cx - bx);
                    sum += features[(by * blocks_x + bx) * block_len + (dy * bc + dx) * cfg.n_bins + bin];
                    count += 1;
                }
            }
        }
        sum / count as f64
    };

    let mut out = GrayImage::zeros(img.height, img.width);
    for cy in 0..cells_y {
        for cx in 0..cells_x {
            for b in 0..cfg.n_bins {
                let v = cell_value(cy, cx, b);
                if v == 0.0 {
                    continue;
                }
                let phi = (b as f64 + 0.5) * bin_width + PI / 2.0;
                let (dx, dy) = (phi.cos(), phi.sin());
                for py in 0..cs {
                    for px in 0..cs {
                        let vx = px as f64 - center;
                        let vy = py as f64 - center;
                        if (vx * dy - vy * dx).abs() <= 0.5 {
                            out.pixels[(cy * cs + py) * img.width + cx * cs + px] += v;
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

/// PLGF recomputing both mask entries inline at every tap.
pub fn plgf_map_naive(img: &GrayImage, cfg: &PlgfConfig) -> Result<GrayImage, TensorError> {
    if cfg.mask_radius == 0 || cfg.denom_floor <= 0.0 {
        return Err(TensorError::InvalidArgument("degenerate PLGF config".into()));
    }
    let r = cfg.mask_radius as isize;
    let mut out = GrayImage::zeros(img.height, img.width);
    for y in 0..img.height {
        for x in 0..img.width {
            let mut sx = 0.0;
            let mut sy = 0.0;
            for m in -r..=r {
                for n in -r..=r {
                    let v = img.get_replicated(y as isize + m, x as isize + n);
                    let (mx, my) = mask_entry(m, n);
                    sx += v * mx;
                    sy += v * my;
                }
            }
            let denom = img.get(y, x).max(cfg.denom_floor);
            let rx = sx / denom;
            let ry = sy / denom;
            out.set(y, x, (rx * rx + ry * ry).sqrt().atan() * 2.0 / PI);
        }
    }
    Ok(out)
}
