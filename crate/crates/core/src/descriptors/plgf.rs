//! Pattern of local gravitational force: the arctangent of the magnitude of
//! a force-field response divided by local intensity.
//!
//! The two masks over offsets (m, n) in [-r, r] (m indexes rows, n columns):
//!
//! ```text
//! Mx(m, n) = cos(atan(m / n)) / (m^2 + n^2)      n != 0
//! My(m, n) = sin(atan(m / n)) / (m^2 + n^2)      n != 0
//! Mx(m, 0) = 0,  My(m, 0) = sign(m) / m^2        m != 0
//! Mx(0, 0) = My(0, 0) = 0
//! ```
//!
//! The n = 0 column takes the n -> 0+ limit: atan(m/n) -> sign(m) * pi/2, so
//! the cosine term vanishes and the sine term becomes sign(m). The masks are
//! applied as a sliding inner product (cross-correlation): the entry at
//! (m, n) weights the pixel at offset (m, n). Every entry with n != 0 is
//! invariant under the (m, n) -> (-m, -n) flip, so a strict flip-convolution
//! would differ only in the sign of the n = 0 column of My; the correlation
//! reading is the one under which the declared n = 0 limit keeps its
//! meaning.
//!
//! The response is `atan(sqrt((Sx/I)^2 + (Sy/I)^2)) * 2/pi` with the
//! denominator floored at `denom_floor`, which keeps the map in [0, 1] and
//! makes it invariant to positive global rescaling of the image (for pixels
//! above the floor).

use crate::image::GrayImage;
use crate::tensor::TensorError;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlgfConfig {
    /// Mask radius r; the mask is (2r+1) x (2r+1), default 5x5.
    pub mask_radius: usize,
    /// Lower bound applied to the intensity denominator.
    pub denom_floor: f64,
}

impl Default for PlgfConfig {
    fn default() -> Self {
        PlgfConfig { mask_radius: 2, denom_floor: 1e-3 }
    }
}

impl PlgfConfig {
    fn validate(&self) -> Result<(), TensorError> {
        if self.mask_radius == 0 {
            return Err(TensorError::InvalidArgument(
                "PLGF mask radius must be at least 1".into(),
            ));
        }
        if self.denom_floor <= 0.0 {
            return Err(TensorError::InvalidArgument(format!(
                "PLGF denominator floor must be positive, got {}",
                self.denom_floor
            )));
        }
        Ok(())
    }
}

/// One mask entry (Mx, My) at row offset `m`, column offset `n`.
#[inline]
pub fn mask_entry(m: isize, n: isize) -> (f64, f64) {
    if m == 0 && n == 0 {
        return (0.0, 0.0);
    }
    let r2 = (m * m + n * n) as f64;
    if n == 0 {
        let sign = if m > 0 { 1.0 } else { -1.0 };
        return (0.0, sign / r2);
    }
    let ang = (m as f64 / n as f64).atan();
    (ang.cos() / r2, ang.sin() / r2)
}

/// PLGF response map in [0, 1].
pub fn plgf_map(img: &GrayImage, cfg: &PlgfConfig) -> Result<GrayImage, TensorError> {
    cfg.validate()?;
    let r = cfg.mask_radius as isize;
    // Precompute the mask once; offsets scan m (rows) outer, n (cols) inner,
    // the same order the correlation below accumulates in.
    let side = (2 * cfg.mask_radius + 1) as isize;
    let mut mask = Vec::with_capacity((side * side) as usize);
    for m in -r..=r {
        for n in -r..=r {
            mask.push(mask_entry(m, n));
        }
    }
    let mut out = GrayImage::zeros(img.height, img.width);
    for y in 0..img.height {
        for x in 0..img.width {
            let mut sx = 0.0;
            let mut sy = 0.0;
            let mut k = 0;
            for m in -r..=r {
                for n in -r..=r {
                    let v = img.get_replicated(y as isize + m, x as isize + n);
                    let (mx, my) = mask[k];
                    sx += v * mx;
                    sy += v * my;
                    k += 1;
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

/// The response a constant image of value >= `denom_floor` produces at every
/// pixel: the intensity cancels, leaving only the mask sums.
pub fn constant_image_response(cfg: &PlgfConfig) -> f64 {
    let r = cfg.mask_radius as isize;
    let mut sx = 0.0;
    let mut sy = 0.0;
    for m in -r..=r {
        for n in -r..=r {
            let (mx, my) = mask_entry(m, n);
            sx += mx;
            sy += my;
        }
    }
    (sx * sx + sy * sy).sqrt().atan() * 2.0 / PI
}
