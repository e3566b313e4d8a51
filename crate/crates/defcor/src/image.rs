//! Single-channel intensity images and their on-disk formats.
//!
//! Images are stored row-major with `(x, y)` = (column, row), origin at the
//! top-left; `y` grows with depth below the probe face. Intensities are kept
//! as reals in `[0, 255]` and persisted as 8-bit binary PGM (`P5`). Color
//! output (flow visualizations) uses binary PPM (`P6`).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Single-channel image, intensities in `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    /// Creates an image filled with a constant intensity.
    pub fn filled(width: usize, height: usize, value: f32) -> Image {
        Image {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Image> {
        if data.len() != width * height {
            return Err(Error::shape(
                "image buffer",
                format!("{}x{}", width, height),
                data.len(),
            ));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Clamps all intensities into `[0, 255]`.
    pub fn clamp_intensities(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 255.0);
        }
    }

    /// Rounds intensities to the nearest 8-bit level, as PGM storage would.
    pub fn quantize(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|&v| v.clamp(0.0, 255.0).round())
                .collect(),
        }
    }

    /// Bilinear resize with the align-corners convention: corner pixel
    /// centers map to corner pixel centers. Math is done in f64.
    pub fn resize(&self, new_width: usize, new_height: usize) -> Image {
        let mut out = Image::filled(new_width, new_height, 0.0);
        let sx = axis_scale(self.width, new_width);
        let sy = axis_scale(self.height, new_height);
        for y in 0..new_height {
            let cy = y as f64 * sy;
            for x in 0..new_width {
                let cx = x as f64 * sx;
                let v = sample_bilinear_f64(&self.data, self.width, self.height, cx, cy);
                out.data[y * new_width + x] = v as f32;
            }
        }
        out
    }

    /// Writes the image as binary PGM (`P5`, maxval 255). Intensities are
    /// clamped and rounded to 8 bits.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(32 + self.data.len());
        write!(&mut bytes, "P5\n{} {}\n255\n", self.width, self.height)
            .expect("in-memory write");
        bytes.extend(
            self.data
                .iter()
                .map(|&v| v.clamp(0.0, 255.0).round() as u8),
        );
        fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read_pgm(path: &Path) -> Result<Image> {
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let (magic, rest) = parse_netpbm_header(&bytes, path)?;
        if magic != "P5" {
            return Err(Error::Format {
                path: path.display().to_string(),
                message: format!("expected P5 magic, found {magic:?}"),
            });
        }
        let (w, h, maxval, pixels) = rest;
        if maxval != 255 {
            return Err(Error::Format {
                path: path.display().to_string(),
                message: format!("unsupported maxval {maxval}"),
            });
        }
        if pixels.len() < w * h {
            return Err(Error::Format {
                path: path.display().to_string(),
                message: format!("truncated pixel data: {} < {}", pixels.len(), w * h),
            });
        }
        Ok(Image {
            width: w,
            height: h,
            data: pixels[..w * h].iter().map(|&b| b as f32).collect(),
        })
    }
}

/// 8-bit RGB image, used for flow visualizations.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> RgbImage {
        RgbImage {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Writes the image as binary PPM (`P6`).
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(32 + self.data.len());
        write!(&mut bytes, "P6\n{} {}\n255\n", self.width, self.height)
            .expect("in-memory write");
        bytes.extend_from_slice(&self.data);
        fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read_ppm(path: &Path) -> Result<RgbImage> {
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let (magic, (w, h, maxval, pixels)) = parse_netpbm_header(&bytes, path)?;
        if magic != "P6" {
            return Err(Error::Format {
                path: path.display().to_string(),
                message: format!("expected P6 magic, found {magic:?}"),
            });
        }
        if maxval != 255 {
            return Err(Error::Format {
                path: path.display().to_string(),
                message: format!("unsupported maxval {maxval}"),
            });
        }
        if pixels.len() < w * h * 3 {
            return Err(Error::Format {
                path: path.display().to_string(),
                message: "truncated pixel data".into(),
            });
        }
        Ok(RgbImage {
            width: w,
            height: h,
            data: pixels[..w * h * 3].to_vec(),
        })
    }
}

/// Zero-mean normalized cross-correlation of two same-size images, in
/// `[-1, 1]`. Constant images have no defined correlation and are rejected.
pub fn ncc(a: &Image, b: &Image) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::shape(
            "ncc",
            format!("{}x{}", a.width, a.height),
            format!("{}x{}", b.width, b.height),
        ));
    }
    let n = a.data.len() as f64;
    let mean_a = a.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mean_b = b.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (&pa, &pb) in a.data.iter().zip(&b.data) {
        let da = pa as f64 - mean_a;
        let db = pb as f64 - mean_b;
        cov += da * db;
        var_a += da * da;
        var_b += db * db;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "constant image has zero variance".into(),
        ));
    }
    Ok(cov / (var_a * var_b).sqrt())
}

/// Source coordinate step per output pixel under align-corners resampling.
pub(crate) fn axis_scale(src: usize, dst: usize) -> f64 {
    if dst <= 1 {
        0.0
    } else {
        (src - 1) as f64 / (dst - 1) as f64
    }
}

/// Bilinear sample at real coordinates, clamped to the image border.
/// Exact at integer coordinates (no resampling blur).
#[inline]
pub(crate) fn sample_bilinear_f64(
    data: &[f32],
    width: usize,
    height: usize,
    x: f64,
    y: f64,
) -> f64 {
    let cx = x.clamp(0.0, (width - 1) as f64);
    let cy = y.clamp(0.0, (height - 1) as f64);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = cx - x0 as f64;
    let fy = cy - y0 as f64;
    let v00 = data[y0 * width + x0] as f64;
    let v01 = data[y0 * width + x1] as f64;
    let v10 = data[y1 * width + x0] as f64;
    let v11 = data[y1 * width + x1] as f64;
    (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
}

/// Parses a binary netpbm header, returning (magic, (w, h, maxval, payload)).
fn parse_netpbm_header<'a>(
    bytes: &'a [u8],
    path: &Path,
) -> Result<(String, (usize, usize, u32, &'a [u8]))> {
    let err = |message: String| Error::Format {
        path: path.display().to_string(),
        message,
    };
    let mut pos = 0;
    let mut tokens: Vec<String> = Vec::new();
    // magic + width + height + maxval, skipping whitespace and # comments
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // single whitespace byte separates the header from binary data
    pos += 1;
    if pos > bytes.len() {
        return Err(err("missing pixel data".into()));
    }
    let w: usize = tokens[1].parse().map_err(|_| err("bad width".into()))?;
    let h: usize = tokens[2].parse().map_err(|_| err("bad height".into()))?;
    let maxval: u32 = tokens[3].parse().map_err(|_| err("bad maxval".into()))?;
    if w < 2 || h < 2 {
        return Err(err(format!("dimensions too small: {w}x{h}")));
    }
    Ok((tokens[0].clone(), (w, h, maxval, &bytes[pos..])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ncc_identical_is_one() {
        let a = gradient_image(8, 6);
        assert!((ncc(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ncc_inverted_is_minus_one() {
        let a = gradient_image(8, 6);
        let mut b = a.clone();
        for v in b.data_mut() {
            *v = 255.0 - *v;
        }
        assert!((ncc(&a, &b).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn ncc_constant_image_rejected() {
        let a = Image::filled(4, 4, 7.0);
        let b = gradient_image(4, 4);
        assert!(matches!(
            ncc(&a, &b),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn pgm_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let img = gradient_image(13, 7).quantize();
        img.write_pgm(&path).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        let back = Image::read_pgm(&path).unwrap();
        assert_eq!(back, img);
        back.write_pgm(&path).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn ppm_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let mut img = RgbImage::new(5, 4);
        for y in 0..4 {
            for x in 0..5 {
                img.set(x, y, [x as u8 * 40, y as u8 * 60, 200]);
            }
        }
        img.write_ppm(&path).unwrap();
        let back = RgbImage::read_ppm(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn resize_preserves_linear_ramps() {
        // bilinear resampling reproduces affine intensity fields exactly
        let img = gradient_image(16, 12);
        let up = img.resize(32, 24);
        let back = up.resize(16, 12);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    fn gradient_image(w: usize, h: usize) -> Image {
        let mut img = Image::filled(w, h, 0.0);
        for y in 0..h {
            for x in 0..w {
                img.set(x, y, (x * 7 + y * 11) as f32 % 256.0);
            }
        }
        img
    }
}
