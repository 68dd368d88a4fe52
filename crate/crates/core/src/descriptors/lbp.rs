//! Local binary patterns on the 3x3 neighborhood.
//!
//! For each pixel, the eight ring neighbors are visited clockwise from the
//! top-left; neighbor i (1-based) contributes 2^(i-1) when its value is >=
//! the center value. Borders replicate the nearest edge pixel, and the 8-bit
//! code is rescaled by 1/255 so the map stays in [0, 1].

use crate::image::GrayImage;

/// Ring offsets (dy, dx), clockwise from the top-left corner.
pub const NEIGHBOR_OFFSETS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
];

/// 8-neighbor LBP code at every pixel, divided by 255.
pub fn lbp_map(img: &GrayImage) -> GrayImage {
    let mut out = GrayImage::zeros(img.height, img.width);
    for y in 0..img.height {
        for x in 0..img.width {
            let center = img.get(y, x);
            let mut code = 0u32;
            for (i, (dy, dx)) in NEIGHBOR_OFFSETS.iter().enumerate() {
                let neighbor = img.get_replicated(y as isize + dy, x as isize + dx);
                if neighbor - center >= 0.0 {
                    code |= 1 << i;
                }
            }
            out.set(y, x, code as f64 / 255.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 3x3 patch filled 1..9 row-major (in /255 units): ring clockwise from
    /// top-left reads (1,2,3,6,9,8,7,4), the center is 5, so the sign bits
    /// are (0,0,0,1,1,1,1,0) and the code is 8+16+32+64 = 120.
    #[test]
    fn hand_case_center_code_is_120() {
        let pixels: Vec<f64> = (1..=9).map(|v| v as f64 / 255.0).collect();
        let img = GrayImage::new(3, 3, pixels).unwrap();
        let map = lbp_map(&img);
        assert_eq!(map.get(1, 1), 120.0 / 255.0);
    }

    /// Ties count as "greater or equal": a constant image sets every bit,
    /// giving code 255 everywhere (1.0 after rescale).
    #[test]
    fn constant_image_saturates() {
        let img = GrayImage::constant(5, 4, 0.3);
        let map = lbp_map(&img);
        assert!(map.pixels.iter().all(|v| *v == 1.0));
    }

    /// Adding a constant to every pixel leaves all comparisons unchanged.
    #[test]
    fn shift_invariance() {
        let base: Vec<f64> = (0..48).map(|i| ((i * 29) % 53) as f64 / 100.0).collect();
        let img = GrayImage::new(6, 8, base.clone()).unwrap();
        let shifted = GrayImage::new(6, 8, base.iter().map(|v| v + 0.17).collect()).unwrap();
        assert_eq!(lbp_map(&img).pixels, lbp_map(&shifted).pixels);
    }
}
