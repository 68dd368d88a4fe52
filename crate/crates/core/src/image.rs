//! Image containers and on-disk formats.
//!
//! Pixels are `f64` in [0, 1]. On disk the lab uses the binary netpbm
//! formats, written byte-exactly so dataset checksums are reproducible:
//!
//! - PGM (P5), 8-bit: `P5\n<width> <height>\n255\n` followed by `h*w` bytes,
//!   row-major.
//! - PPM (P6), 8-bit: `P6\n<width> <height>\n255\n` followed by `h*w` RGB
//!   byte triples.
//!
//! Byte `b` maps to `b / 255`; writing maps `v` to `round(clamp(v,0,1)*255)`.
//! Readers accept any whitespace and `#` comments in the header.
//!
//! For exactness tests a lossless dump exists: magic `MMF0`, then channels,
//! height, width as little-endian u32, then `c*h*w` little-endian f32 values
//! in channel-major order.

use crate::tensor::TensorError;
use std::fs;
use std::io::Write;
use std::path::Path;

/// Single-channel image, row-major `f64` pixels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self, TensorError> {
        if pixels.len() != height * width {
            return Err(TensorError::Shape(format!(
                "image {height}x{width} needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(GrayImage { height, width, pixels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        GrayImage { height, width, pixels: vec![0.0; height * width] }
    }

    pub fn constant(height: usize, width: usize, v: f64) -> Self {
        GrayImage { height, width, pixels: vec![v; height * width] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    /// Pixel access with edge replication for out-of-range coordinates.
    #[inline]
    pub fn get_replicated(&self, y: isize, x: isize) -> f64 {
        let yy = y.clamp(0, self.height as isize - 1) as usize;
        let xx = x.clamp(0, self.width as isize - 1) as usize;
        self.pixels[yy * self.width + xx]
    }

    /// Snaps every pixel to the 8-bit grid (`round(v*255)/255`), the exact
    /// value a write/read round trip would produce.
    pub fn quantize8(&mut self) {
        for p in &mut self.pixels {
            *p = (p.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
}

/// Channel-major multi-channel image (C x H x W), matching tensor layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl PlanarImage {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self, TensorError> {
        if data.len() != channels * height * width {
            return Err(TensorError::Shape(format!(
                "planar image {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(PlanarImage { channels, height, width, data })
    }

    pub fn from_channels(chans: &[GrayImage]) -> Result<Self, TensorError> {
        let (h, w) = (chans[0].height, chans[0].width);
        if chans.iter().any(|c| c.height != h || c.width != w) {
            return Err(TensorError::Shape("channel extents differ".into()));
        }
        let mut data = Vec::with_capacity(chans.len() * h * w);
        for c in chans {
            data.extend_from_slice(&c.pixels);
        }
        Ok(PlanarImage { channels: chans.len(), height: h, width: w, data })
    }

    pub fn channel(&self, c: usize) -> GrayImage {
        let hw = self.height * self.width;
        GrayImage {
            height: self.height,
            width: self.width,
            pixels: self.data[c * hw..(c + 1) * hw].to_vec(),
        }
    }

    pub fn quantize8(&mut self) {
        for p in &mut self.data {
            *p = (p.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
}

/// ITU-R BT.601 luma: `0.299 R + 0.587 G + 0.114 B`.
pub fn rgb_to_gray(rgb: &PlanarImage) -> Result<GrayImage, TensorError> {
    if rgb.channels != 3 {
        return Err(TensorError::Shape(format!(
            "grayscale conversion expects 3 channels, got {}",
            rgb.channels
        )));
    }
    let hw = rgb.height * rgb.width;
    let (r, g, b) = (&rgb.data[..hw], &rgb.data[hw..2 * hw], &rgb.data[2 * hw..]);
    let pixels = (0..hw)
        .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
        .collect();
    Ok(GrayImage { height: rgb.height, width: rgb.width, pixels })
}

fn quantize_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<(), TensorError> {
    let mut buf = Vec::with_capacity(20 + img.pixels.len());
    write!(buf, "P5\n{} {}\n255\n", img.width, img.height)?;
    buf.extend(img.pixels.iter().map(|v| quantize_byte(*v)));
    fs::write(path, buf)?;
    Ok(())
}

pub fn write_ppm(path: &Path, img: &PlanarImage) -> Result<(), TensorError> {
    if img.channels != 3 {
        return Err(TensorError::Shape(format!(
            "PPM requires 3 channels, got {}",
            img.channels
        )));
    }
    let hw = img.height * img.width;
    let mut buf = Vec::with_capacity(20 + 3 * hw);
    write!(buf, "P6\n{} {}\n255\n", img.width, img.height)?;
    for i in 0..hw {
        buf.push(quantize_byte(img.data[i]));
        buf.push(quantize_byte(img.data[hw + i]));
        buf.push(quantize_byte(img.data[2 * hw + i]));
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Parses a netpbm header after the magic: returns (width, height, maxval,
/// offset of first data byte).
fn parse_pnm_header(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, usize), TensorError> {
    let mut fields = Vec::with_capacity(3);
    let mut i = 2; // past the 2-byte magic
    while fields.len() < 3 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        if start == i {
            return Err(TensorError::Format(format!(
                "{}: malformed netpbm header",
                path.display()
            )));
        }
        let text = std::str::from_utf8(&bytes[start..i]).unwrap();
        fields.push(text.parse::<usize>().map_err(|_| {
            TensorError::Format(format!("{}: bad header field {text}", path.display()))
        })?);
    }
    // Exactly one whitespace byte separates the header from the raster.
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(TensorError::Format(format!(
            "{}: missing raster separator",
            path.display()
        )));
    }
    Ok((fields[0], fields[1], fields[2], i + 1))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage, TensorError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(TensorError::Format(format!(
            "{}: not a binary PGM (P5)",
            path.display()
        )));
    }
    let (w, h, maxval, off) = parse_pnm_header(&bytes, path)?;
    if maxval != 255 {
        return Err(TensorError::Format(format!(
            "{}: only 8-bit images supported, maxval {maxval}",
            path.display()
        )));
    }
    if bytes.len() < off + h * w {
        return Err(TensorError::Format(format!(
            "{}: truncated raster ({} of {} bytes)",
            path.display(),
            bytes.len() - off,
            h * w
        )));
    }
    let pixels = bytes[off..off + h * w].iter().map(|b| *b as f64 / 255.0).collect();
    Ok(GrayImage { height: h, width: w, pixels })
}

pub fn read_ppm(path: &Path) -> Result<PlanarImage, TensorError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(TensorError::Format(format!(
            "{}: not a binary PPM (P6)",
            path.display()
        )));
    }
    let (w, h, maxval, off) = parse_pnm_header(&bytes, path)?;
    if maxval != 255 {
        return Err(TensorError::Format(format!(
            "{}: only 8-bit images supported, maxval {maxval}",
            path.display()
        )));
    }
    let hw = h * w;
    if bytes.len() < off + 3 * hw {
        return Err(TensorError::Format(format!(
            "{}: truncated raster ({} of {} bytes)",
            path.display(),
            bytes.len() - off,
            3 * hw
        )));
    }
    let mut data = vec![0.0; 3 * hw];
    for i in 0..hw {
        data[i] = bytes[off + 3 * i] as f64 / 255.0;
        data[hw + i] = bytes[off + 3 * i + 1] as f64 / 255.0;
        data[2 * hw + i] = bytes[off + 3 * i + 2] as f64 / 255.0;
    }
    Ok(PlanarImage { channels: 3, height: h, width: w, data })
}

const F32_DUMP_MAGIC: &[u8; 4] = b"MMF0";

/// Lossless float dump of a channel-major image, stored as f32.
pub fn write_f32_dump(path: &Path, img: &PlanarImage) -> Result<(), TensorError> {
    let mut buf = Vec::with_capacity(16 + 4 * img.data.len());
    buf.extend_from_slice(F32_DUMP_MAGIC);
    for dim in [img.channels, img.height, img.width] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in &img.data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_f32_dump(path: &Path) -> Result<PlanarImage, TensorError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..4] != F32_DUMP_MAGIC {
        return Err(TensorError::Format(format!(
            "{}: not an MMF0 float dump",
            path.display()
        )));
    }
    let dim = |i: usize| {
        u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize
    };
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let n = c * h * w;
    if bytes.len() != 16 + 4 * n {
        return Err(TensorError::Format(format!(
            "{}: dump holds {} bytes for {n} values",
            path.display(),
            bytes.len() - 16
        )));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok(PlanarImage { channels: c, height: h, width: w, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_is_bitwise_stable() {
        let dir = std::env::temp_dir().join("mmfas_image_tests");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("round_trip.pgm");
        let mut img = GrayImage::zeros(3, 5);
        for (i, p) in img.pixels.iter_mut().enumerate() {
            *p = i as f64 / 14.0;
        }
        img.quantize8();
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(img, back);
        // A second write of the re-read image produces identical bytes.
        let first = fs::read(&path).unwrap();
        write_pgm(&path, &back).unwrap();
        assert_eq!(first, fs::read(&path).unwrap());
    }

    #[test]
    fn ppm_round_trip_preserves_planes() {
        let dir = std::env::temp_dir().join("mmfas_image_tests");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("round_trip.ppm");
        let mut img = PlanarImage::new(3, 2, 2, (0..12).map(|i| i as f64 / 11.0).collect()).unwrap();
        img.quantize8();
        write_ppm(&path, &img).unwrap();
        assert_eq!(read_ppm(&path).unwrap(), img);
    }

    #[test]
    fn f32_dump_round_trips() {
        let dir = std::env::temp_dir().join("mmfas_image_tests");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("dump.f32");
        let img = PlanarImage::new(2, 2, 3, (0..12).map(|i| (i as f64).sin()).collect()).unwrap();
        write_f32_dump(&path, &img).unwrap();
        let back = read_f32_dump(&path).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = std::env::temp_dir().join("mmfas_image_tests");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("comment.pgm");
        fs::write(&path, b"P5\n# a comment\n2 1\n255\n\x00\xff").unwrap();
        let img = read_pgm(&path).unwrap();
        assert_eq!(img.pixels, vec![0.0, 1.0]);
    }

    #[test]
    fn luma_weights() {
        let img = PlanarImage::new(3, 1, 1, vec![1.0, 0.0, 0.0]).unwrap();
        assert!((rgb_to_gray(&img).unwrap().pixels[0] - 0.299).abs() < 1e-12);
    }
}
