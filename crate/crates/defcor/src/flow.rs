//! Dense displacement fields and the algebra the corrector is built on:
//! warping, composition, rescaling, inversion, endpoint error and color
//! visualization.
//!
//! A flow field stores one `(dx, dy)` vector per pixel, in pixel units,
//! with the recovery semantics `warped(P) = image(P + flow(P))`: warping a
//! deformed image with the true correction field yields the uncompressed
//! geometry. Samples falling outside the image are clamped to the border.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{axis_scale, sample_bilinear_f64, Image, RgbImage};

/// Per-pixel 2-vector displacement map; `dx` lateral, `dy` axial (down).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> FlowField {
        FlowField {
            width,
            height,
            dx: vec![0.0; width * height],
            dy: vec![0.0; width * height],
        }
    }

    pub fn from_components(
        width: usize,
        height: usize,
        dx: Vec<f64>,
        dy: Vec<f64>,
    ) -> Result<FlowField> {
        if dx.len() != width * height || dy.len() != width * height {
            return Err(Error::shape(
                "flow buffers",
                format!("{}x{}", width, height),
                format!("dx {} dy {}", dx.len(), dy.len()),
            ));
        }
        Ok(FlowField {
            width,
            height,
            dx,
            dy,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dx(&self) -> &[f64] {
        &self.dx
    }

    pub fn dy(&self) -> &[f64] {
        &self.dy
    }

    pub fn dx_mut(&mut self) -> &mut [f64] {
        &mut self.dx
    }

    pub fn dy_mut(&mut self) -> &mut [f64] {
        &mut self.dy
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.dx[i], self.dy[i])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, dx: f64, dy: f64) {
        let i = y * self.width + x;
        self.dx[i] = dx;
        self.dy[i] = dy;
    }

    pub fn same_shape(&self, other: &FlowField) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Largest vector magnitude in the field.
    pub fn max_magnitude(&self) -> f64 {
        self.dx
            .iter()
            .zip(&self.dy)
            .map(|(&dx, &dy)| (dx * dx + dy * dy).sqrt())
            .fold(0.0, f64::max)
    }

    /// Flow file format `DFF1`: magic bytes, u32 LE width, u32 LE height,
    /// then H*W pairs of f32 LE `(dx, dy)`, row-major.
    pub fn write_dff(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(12 + self.dx.len() * 8);
        bytes.extend_from_slice(b"DFF1");
        bytes.extend_from_slice(&(self.width as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.height as u32).to_le_bytes());
        for i in 0..self.dx.len() {
            bytes.extend_from_slice(&(self.dx[i] as f32).to_le_bytes());
            bytes.extend_from_slice(&(self.dy[i] as f32).to_le_bytes());
        }
        fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read_dff(path: &Path) -> Result<FlowField> {
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let fmt = |message: String| Error::Format {
            path: path.display().to_string(),
            message,
        };
        if bytes.len() < 12 || &bytes[0..4] != b"DFF1" {
            return Err(fmt("missing DFF1 magic".into()));
        }
        let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let need = 12 + w * h * 8;
        if bytes.len() < need {
            return Err(fmt(format!("truncated: {} < {}", bytes.len(), need)));
        }
        let mut dx = Vec::with_capacity(w * h);
        let mut dy = Vec::with_capacity(w * h);
        for i in 0..w * h {
            let o = 12 + i * 8;
            dx.push(f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64);
            dy.push(f32::from_le_bytes(bytes[o + 4..o + 8].try_into().unwrap()) as f64);
        }
        FlowField::from_components(w, h, dx, dy)
    }
}

/// Warps an image by a flow field: `out(P) = bilinear(image, P + flow(P))`,
/// with out-of-bounds sample coordinates clamped to the border. Exact for
/// zero flow (integer coordinates sample without blur).
pub fn warp(image: &Image, flow: &FlowField) -> Result<Image> {
    if image.width() != flow.width || image.height() != flow.height {
        return Err(Error::shape(
            "warp",
            format!("{}x{}", image.width(), image.height()),
            format!("{}x{}", flow.width, flow.height),
        ));
    }
    let (w, h) = (flow.width, flow.height);
    let mut out = Image::filled(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = x as f64 + flow.dx[i];
            let sy = y as f64 + flow.dy[i];
            let v = sample_bilinear_f64(image.data(), w, h, sx, sy);
            out.data_mut()[i] = v as f32;
        }
    }
    Ok(out)
}

/// Warps each channel of a flow field by another flow (bilinear, clamped).
fn warp_flow(field: &FlowField, by: &FlowField) -> FlowField {
    let (w, h) = (by.width, by.height);
    let mut out = FlowField::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = x as f64 + by.dx[i];
            let sy = y as f64 + by.dy[i];
            out.dx[i] = sample_channel(&field.dx, w, h, sx, sy);
            out.dy[i] = sample_channel(&field.dy, w, h, sx, sy);
        }
    }
    out
}

#[inline]
fn sample_channel(data: &[f64], width: usize, height: usize, x: f64, y: f64) -> f64 {
    let cx = x.clamp(0.0, (width - 1) as f64);
    let cy = y.clamp(0.0, (height - 1) as f64);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = cx - x0 as f64;
    let fy = cy - y0 as f64;
    let v00 = data[y0 * width + x0];
    let v01 = data[y0 * width + x1];
    let v10 = data[y1 * width + x0];
    let v11 = data[y1 * width + x1];
    (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
}

/// Chains two displacement fields: `f_1m (+) f_m2 = f_1m + warp(f_m2, f_1m)`,
/// so that warping once by the composite matches warping sequentially.
pub fn compose_flows(f_1m: &FlowField, f_m2: &FlowField) -> Result<FlowField> {
    if !f_1m.same_shape(f_m2) {
        return Err(Error::shape(
            "compose_flows",
            format!("{}x{}", f_1m.width, f_1m.height),
            format!("{}x{}", f_m2.width, f_m2.height),
        ));
    }
    let mut out = warp_flow(f_m2, f_1m);
    for i in 0..out.dx.len() {
        out.dx[i] += f_1m.dx[i];
        out.dy[i] += f_1m.dy[i];
    }
    Ok(out)
}

/// Upsamples a field by an integer factor with bilinear interpolation
/// (align-corners) and multiplies every vector by the factor, so that
/// displacements stay in the target resolution's pixel units.
pub fn scale_flow_up(f: &FlowField, c_s: usize) -> Result<FlowField> {
    if c_s < 2 {
        return Err(Error::InvalidInput(format!(
            "scale_flow_up factor must be >= 2, got {c_s}"
        )));
    }
    Ok(resize_flow(f, f.width * c_s, f.height * c_s, c_s as f64))
}

/// Downsamples a field by an integer factor that must divide both
/// dimensions; vectors are multiplied by `1/factor`.
pub fn scale_flow_down(f: &FlowField, factor: usize) -> Result<FlowField> {
    if factor == 0 || f.width % factor != 0 || f.height % factor != 0 {
        return Err(Error::NonDivisible {
            context: "scale_flow_down",
            w: f.width,
            h: f.height,
            factor,
        });
    }
    Ok(resize_flow(
        f,
        f.width / factor,
        f.height / factor,
        1.0 / factor as f64,
    ))
}

fn resize_flow(f: &FlowField, nw: usize, nh: usize, vector_scale: f64) -> FlowField {
    let mut out = FlowField::zeros(nw, nh);
    let sx = axis_scale(f.width, nw);
    let sy = axis_scale(f.height, nh);
    for y in 0..nh {
        let cy = y as f64 * sy;
        for x in 0..nw {
            let cx = x as f64 * sx;
            let i = y * nw + x;
            out.dx[i] = vector_scale * sample_channel(&f.dx, f.width, f.height, cx, cy);
            out.dy[i] = vector_scale * sample_channel(&f.dy, f.width, f.height, cx, cy);
        }
    }
    out
}

/// Numerically inverts a displacement field by fixed-point iteration:
/// returns `g` such that `x + g(x) + f(x + g(x)) ~= x`. Used to synthesize a
/// deformed image from a known correction field (`deformed = warp(orig, g)`).
pub fn invert_flow(f: &FlowField, max_iters: usize, tol_px: f64) -> FlowField {
    let (w, h) = (f.width, f.height);
    let mut g = FlowField::zeros(w, h);
    for _ in 0..max_iters {
        let mut max_step: f64 = 0.0;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let sx = x as f64 + g.dx[i];
                let sy = y as f64 + g.dy[i];
                let nx = -sample_channel(&f.dx, w, h, sx, sy);
                let ny = -sample_channel(&f.dy, w, h, sx, sy);
                max_step = max_step.max((nx - g.dx[i]).abs().max((ny - g.dy[i]).abs()));
                g.dx[i] = nx;
                g.dy[i] = ny;
            }
        }
        if max_step < tol_px {
            break;
        }
    }
    g
}

/// Endpoint-error summary over a field pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpeStats {
    pub mean: f64,
    pub sd: f64,
    pub max: f64,
    /// Fraction of pixels with error larger than 10 px.
    pub per10: f64,
    /// Fraction of pixels with error larger than 15 px.
    pub per15: f64,
    /// Fraction of pixels with error larger than 20 px.
    pub per20: f64,
}

/// Per-pixel Euclidean distance between two fields plus summary stats.
pub fn epe(pred: &FlowField, gt: &FlowField) -> Result<(Vec<f64>, EpeStats)> {
    if !pred.same_shape(gt) {
        return Err(Error::shape(
            "epe",
            format!("{}x{}", pred.width, pred.height),
            format!("{}x{}", gt.width, gt.height),
        ));
    }
    let n = pred.dx.len();
    let mut map = Vec::with_capacity(n);
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    let mut over = [0usize; 3];
    for i in 0..n {
        let ex = pred.dx[i] - gt.dx[i];
        let ey = pred.dy[i] - gt.dy[i];
        let e = (ex * ex + ey * ey).sqrt();
        sum += e;
        max = max.max(e);
        if e > 10.0 {
            over[0] += 1;
        }
        if e > 15.0 {
            over[1] += 1;
        }
        if e > 20.0 {
            over[2] += 1;
        }
        map.push(e);
    }
    let mean = sum / n as f64;
    let var = map.iter().map(|&e| (e - mean) * (e - mean)).sum::<f64>() / n as f64;
    Ok((
        map,
        EpeStats {
            mean,
            sd: var.sqrt(),
            max,
            per10: over[0] as f64 / n as f64,
            per15: over[1] as f64 / n as f64,
            per20: over[2] as f64 / n as f64,
        },
    ))
}

/// Renders a field as an RGB image: hue encodes direction, saturation the
/// relative magnitude. The zero vector maps to white. Magnitudes are
/// normalized by `max_magnitude` when given, else by the field's own max.
pub fn flow_to_color(f: &FlowField, max_magnitude: Option<f64>) -> RgbImage {
    let norm = match max_magnitude {
        Some(m) if m > 0.0 => m,
        _ => {
            let m = f.max_magnitude();
            if m > 0.0 {
                m
            } else {
                1.0
            }
        }
    };
    let mut out = RgbImage::new(f.width, f.height);
    for y in 0..f.height {
        for x in 0..f.width {
            let (dx, dy) = f.get(x, y);
            let mag = ((dx * dx + dy * dy).sqrt() / norm).min(1.0);
            let hue_deg = dy.atan2(dx).to_degrees().rem_euclid(360.0);
            out.set(x, y, hsv_to_rgb(hue_deg, mag, 1.0));
        }
    }
    out
}

/// HSV to 8-bit RGB; h in degrees, s and v in [0, 1].
fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let xcomp = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r1, g1, b1) = match hp as usize {
        0 => (c, xcomp, 0.0),
        1 => (xcomp, c, 0.0),
        2 => (0.0, c, xcomp),
        3 => (0.0, xcomp, c),
        4 => (xcomp, 0.0, c),
        _ => (c, 0.0, xcomp),
    };
    let m = v - c;
    [
        ((r1 + m) * 255.0).round() as u8,
        ((g1 + m) * 255.0).round() as u8,
        ((b1 + m) * 255.0).round() as u8,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn test_image(w: usize, h: usize) -> Image {
        let mut img = Image::filled(w, h, 0.0);
        for y in 0..h {
            for x in 0..w {
                let v = 127.0 + 90.0 * ((x as f32 * 0.35).sin() * (y as f32 * 0.3).cos());
                img.set(x, y, v.clamp(0.0, 255.0));
            }
        }
        img
    }

    #[test]
    fn warp_zero_flow_is_identity() {
        let img = test_image(9, 7);
        let flow = FlowField::zeros(9, 7);
        let out = warp(&img, &flow).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn warp_half_pixel_bilinear_oracle() {
        // 1x2 image [0, 10], flow (+0.5, 0) at pixel 0 -> 5.0
        let img = Image::from_vec(2, 2, vec![0.0, 10.0, 0.0, 10.0]).unwrap();
        let mut flow = FlowField::zeros(2, 2);
        flow.set(0, 0, 0.5, 0.0);
        let out = warp(&img, &flow).unwrap();
        assert!((out.get(0, 0) - 5.0).abs() < 1e-6);
        assert_eq!(out.get(1, 0), 10.0);
    }

    #[test]
    fn warp_integer_shift_is_exact_in_interior() {
        let img = test_image(12, 10);
        let mut flow = FlowField::zeros(12, 10);
        for y in 0..10 {
            for x in 0..12 {
                flow.set(x, y, 2.0, -1.0);
            }
        }
        let out = warp(&img, &flow).unwrap();
        for y in 1..10 {
            for x in 0..10 {
                assert_eq!(out.get(x, y), img.get(x + 2, y - 1));
            }
        }
    }

    #[test]
    fn warp_shape_mismatch_rejected() {
        let img = test_image(4, 4);
        let flow = FlowField::zeros(5, 4);
        assert!(warp(&img, &flow).is_err());
    }

    #[test]
    fn compose_zero_zero_is_zero() {
        let z = FlowField::zeros(6, 5);
        let c = compose_flows(&z, &z).unwrap();
        assert_eq!(c, z);
    }

    #[test]
    fn compose_constant_translations_add() {
        let mut a = FlowField::zeros(8, 8);
        let mut b = FlowField::zeros(8, 8);
        for i in 0..64 {
            a.dy_mut()[i] = 1.5;
            b.dy_mut()[i] = 0.75;
        }
        let c = compose_flows(&a, &b).unwrap();
        for i in 0..64 {
            assert!((c.dy()[i] - 2.25).abs() < 1e-12);
            assert!(c.dx()[i].abs() < 1e-12);
        }
    }

    #[test]
    fn compose_matches_sequential_warps() {
        // random smooth fields: warping once by the composite tracks
        // warping twice, up to interpolation error
        let img = test_image(16, 16);
        let f_m2 = smooth_field(16, 16, 3);
        let f_1m = smooth_field(16, 16, 7);
        let seq = warp(&warp(&img, &f_m2).unwrap(), &f_1m).unwrap();
        let composed = warp(&img, &compose_flows(&f_1m, &f_m2).unwrap()).unwrap();
        let mean_err = seq
            .data()
            .iter()
            .zip(composed.data())
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / 256.0;
        assert!(mean_err <= 2.0, "mean abs intensity error {mean_err}");
    }

    fn smooth_field(w: usize, h: usize, phase: usize) -> FlowField {
        crate::phantom::make_elastic_field(w, h, 1.5, 3.0, phase as u64).unwrap()
    }

    #[test]
    fn scale_up_constant_field() {
        let mut f = FlowField::zeros(5, 4);
        for y in 0..4 {
            for x in 0..5 {
                f.set(x, y, 1.0, -2.0);
            }
        }
        let up = scale_flow_up(&f, 2).unwrap();
        assert_eq!(up.width(), 10);
        assert_eq!(up.height(), 8);
        for i in 0..80 {
            assert!((up.dx()[i] - 2.0).abs() < 1e-12);
            assert!((up.dy()[i] + 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_down_constant_field() {
        let mut f = FlowField::zeros(6, 4);
        for y in 0..4 {
            for x in 0..6 {
                f.set(x, y, 4.0, 8.0);
            }
        }
        let down = scale_flow_down(&f, 2).unwrap();
        assert_eq!(down.width(), 3);
        assert_eq!(down.height(), 2);
        for i in 0..6 {
            assert!((down.dx()[i] - 2.0).abs() < 1e-12);
            assert!((down.dy()[i] - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_down_requires_divisible_dims() {
        let f = FlowField::zeros(5, 4);
        assert!(scale_flow_down(&f, 2).is_err());
    }

    #[test]
    fn scale_roundtrip_reproduces_linear_ramps() {
        // bilinear resampling is exact on fields linear in position
        let mut f = FlowField::zeros(10, 8);
        for y in 0..8 {
            for x in 0..10 {
                f.set(x, y, 0.3 * x as f64 - 0.1 * y as f64, 0.5 * y as f64 + 1.0);
            }
        }
        let round = scale_flow_down(&scale_flow_up(&f, 2).unwrap(), 2).unwrap();
        for y in 1..7 {
            for x in 1..9 {
                let (adx, ady) = f.get(x, y);
                let (bdx, bdy) = round.get(x, y);
                assert!((adx - bdx).abs() <= 1e-6);
                assert!((ady - bdy).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn epe_identical_fields_zero() {
        let f = smooth_field(7, 6, 1);
        let (map, stats) = epe(&f, &f).unwrap();
        assert!(map.iter().all(|&e| e == 0.0));
        assert_eq!(stats.mean, 0.0);
        assert_eq!(stats.max, 0.0);
    }

    #[test]
    fn epe_pythagorean_offset() {
        let gt = FlowField::zeros(4, 4);
        let mut pred = FlowField::zeros(4, 4);
        for i in 0..16 {
            pred.dx_mut()[i] = 3.0;
            pred.dy_mut()[i] = 4.0;
        }
        let (map, stats) = epe(&pred, &gt).unwrap();
        assert!(map.iter().all(|&e| (e - 5.0).abs() < 1e-12));
        assert_eq!(stats.per10, 0.0);
        assert!((stats.mean - 5.0).abs() < 1e-12);
        assert_eq!(stats.sd, 0.0);
    }

    #[test]
    fn epe_threshold_ordering() {
        let gt = FlowField::zeros(4, 4);
        let mut pred = FlowField::zeros(4, 4);
        for (i, v) in [(0usize, 12.0), (1, 17.0), (2, 25.0)] {
            pred.dy_mut()[i] = v;
        }
        let (_, stats) = epe(&pred, &gt).unwrap();
        assert!(stats.per10 >= stats.per15 && stats.per15 >= stats.per20);
        assert!((stats.per10 - 3.0 / 16.0).abs() < 1e-12);
        assert!((stats.per20 - 1.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn color_zero_field_is_white() {
        let f = FlowField::zeros(3, 3);
        let rgb = flow_to_color(&f, None);
        assert!(rgb.data.iter().all(|&b| b == 255));
    }

    #[test]
    fn color_constant_field_single_hue() {
        let mut f = FlowField::zeros(4, 4);
        for i in 0..16 {
            f.dx_mut()[i] = 2.0;
        }
        let rgb = flow_to_color(&f, None);
        let first = rgb.get(0, 0);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(rgb.get(x, y), first);
            }
        }
    }

    #[test]
    fn color_opposite_flows_complementary_hues() {
        let mut f = FlowField::zeros(8, 1);
        let mut g = FlowField::zeros(8, 1);
        for (i, ang) in (0..8).map(|i| (i, i as f64 * std::f64::consts::FRAC_PI_4)) {
            f.dx_mut()[i] = ang.cos() * 3.0;
            f.dy_mut()[i] = ang.sin() * 3.0;
            g.dx_mut()[i] = -f.dx()[i];
            g.dy_mut()[i] = -f.dy()[i];
        }
        let cf = flow_to_color(&f, Some(3.0));
        let cg = flow_to_color(&g, Some(3.0));
        for x in 0..8 {
            let hf = rgb_hue(cf.get(x, 0));
            let hg = rgb_hue(cg.get(x, 0));
            let mut diff = (hf - hg).abs();
            if diff > 180.0 {
                diff = 360.0 - diff;
            }
            assert!((diff - 180.0).abs() < 2.0, "hue diff {diff}");
        }
    }

    fn rgb_hue(rgb: [u8; 3]) -> f64 {
        let r = rgb[0] as f64 / 255.0;
        let g = rgb[1] as f64 / 255.0;
        let b = rgb[2] as f64 / 255.0;
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let d = max - min;
        if d == 0.0 {
            return 0.0;
        }
        let h = if max == r {
            ((g - b) / d).rem_euclid(6.0)
        } else if max == g {
            (b - r) / d + 2.0
        } else {
            (r - g) / d + 4.0
        };
        h * 60.0
    }

    #[test]
    fn invert_flow_roundtrip_small() {
        let f = smooth_field(16, 16, 2);
        let g = invert_flow(&f, 30, 1e-3);
        let comp = compose_flows(&g, &f).unwrap();
        let (_, stats) = epe(&comp, &FlowField::zeros(16, 16)).unwrap();
        assert!(stats.mean < 0.1, "mean {}", stats.mean);
    }

    #[test]
    fn dff_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.dff");
        let f = smooth_field(6, 5, 3);
        f.write_dff(&path).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        let back = FlowField::read_dff(&path).unwrap();
        back.write_dff(&path).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
        assert_eq!(back.width(), 6);
        assert_eq!(back.height(), 5);
    }

    proptest! {
        #[test]
        fn epe_symmetric(seed_a in 0usize..50, seed_b in 0usize..50) {
            let a = smooth_field(9, 9, seed_a);
            let b = smooth_field(9, 9, seed_b);
            let (_, sab) = epe(&a, &b).unwrap();
            let (_, sba) = epe(&b, &a).unwrap();
            prop_assert!((sab.mean - sba.mean).abs() < 1e-12);
            prop_assert!((sab.max - sba.max).abs() < 1e-12);
            prop_assert_eq!(sab.mean == 0.0, seed_a == seed_b);
        }

        #[test]
        fn compose_with_zero_is_identity(seed in 0usize..50) {
            let f = smooth_field(8, 8, seed);
            let z = FlowField::zeros(8, 8);
            let right = compose_flows(&f, &z).unwrap();
            let left = compose_flows(&z, &f).unwrap();
            for i in 0..64 {
                prop_assert!((right.dx()[i] - f.dx()[i]).abs() < 1e-12);
                prop_assert!((right.dy()[i] - f.dy()[i]).abs() < 1e-12);
                prop_assert!((left.dx()[i] - f.dx()[i]).abs() < 1e-12);
                prop_assert!((left.dy()[i] - f.dy()[i]).abs() < 1e-12);
            }
        }
    }
}
