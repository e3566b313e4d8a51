//! Synthetic ultrasound-like phantoms and force-parameterized ground-truth
//! deformation fields.
//!
//! The simulator replaces in-vivo acquisition at desk scale: it renders a
//! layered speckle phantom with an optional rigid inclusion (bone surrogate
//! with an acoustic shadow), derives a per-pixel compliance map, and turns a
//! contact force into a dense correction field. The ground-truth flow maps
//! the deformed image back to the uncompressed one, i.e. it is exactly the
//! field the corrector must predict; the deformed image itself is produced
//! by numerically inverting the forward compression.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{compose_flows, invert_flow, warp, FlowField};
use crate::image::Image;

/// One tissue band of the phantom.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerSpec {
    /// Lower boundary of the band as a fraction of the image height,
    /// strictly increasing across layers, last one 1.0.
    pub depth_fraction: f64,
    /// Per-row compliance surrogate (px per N per row).
    pub compliance: f64,
    pub mean_intensity: f64,
    /// Multiplicative speckle amplitude in [0, 1).
    pub speckle_amplitude: f64,
}

/// Rigid disk inclusion: bright surface arc, near-zero compliance, darkened
/// acoustic-shadow column below.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InclusionSpec {
    pub center_x: f64,
    pub center_y: f64,
    pub radius: f64,
    /// Surface-arc intensity.
    pub intensity: f64,
    /// Compliance of inclusion pixels; 0 models bone.
    pub compliance: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub width: usize,
    pub height: usize,
    pub layers: Vec<LayerSpec>,
    pub inclusion: Option<InclusionSpec>,
    /// Amplitude of the sinusoidal waviness of layer interfaces, px.
    pub interface_wave_px: f64,
    /// Lateral-bulge coupling: dx = coeff * d(dy)/dx, smoothed.
    pub lateral_coeff: f64,
    pub rng_seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::InvalidInput(format!(
                "phantom too small: {}x{}",
                self.width, self.height
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidInput("phantom needs at least one layer".into()));
        }
        let mut prev = 0.0;
        for layer in &self.layers {
            if layer.depth_fraction <= prev || layer.depth_fraction > 1.0 {
                return Err(Error::InvalidInput(format!(
                    "layer depth fractions must be strictly increasing in (0,1]: {}",
                    layer.depth_fraction
                )));
            }
            if layer.compliance < 0.0 {
                return Err(Error::InvalidInput("negative layer compliance".into()));
            }
            prev = layer.depth_fraction;
        }
        if let Some(inc) = &self.inclusion {
            let (w, h) = (self.width as f64, self.height as f64);
            if inc.center_x - inc.radius < 0.0
                || inc.center_x + inc.radius >= w
                || inc.center_y - inc.radius < 0.0
                || inc.center_y + inc.radius >= h
            {
                return Err(Error::InvalidInput(
                    "inclusion extends outside image bounds".into(),
                ));
            }
        }
        Ok(())
    }

    /// Scales all layer compliances so that the mean inclusion-free column of
    /// the compliance map sums to `target_px_per_n`, i.e. the deepest row
    /// displaces by `force_n * target_px_per_n` pixels.
    pub fn scaled_to_column_compliance(mut self, target_px_per_n: f64) -> Result<PhantomSpec> {
        self.validate()?;
        let geo = Geometry::build(&self)?;
        let mut sum = 0.0;
        let mut cols = 0usize;
        for x in 0..self.width {
            if let Some(inc) = &self.inclusion {
                if (x as f64 - inc.center_x).abs() <= inc.radius + 1.0 {
                    continue;
                }
            }
            for y in 0..self.height {
                sum += geo.compliance(&self, x, y);
            }
            cols += 1;
        }
        if cols == 0 || sum <= 0.0 {
            return Err(Error::InvalidInput(
                "cannot normalize compliance: no free column or zero compliance".into(),
            ));
        }
        let scale = target_px_per_n / (sum / cols as f64);
        for layer in &mut self.layers {
            layer.compliance *= scale;
        }
        Ok(self)
    }
}

/// Layer-boundary curves and inclusion geometry shared by rendering and
/// compression simulation.
struct Geometry {
    /// boundaries[b][x] = y of boundary b at column x (one per layer).
    boundaries: Vec<Vec<f64>>,
}

impl Geometry {
    fn build(spec: &PhantomSpec) -> Result<Geometry> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed.wrapping_mul(0x9e3779b9));
        let mut boundaries = Vec::with_capacity(spec.layers.len());
        for (b, layer) in spec.layers.iter().enumerate() {
            let base = layer.depth_fraction * (spec.height - 1) as f64;
            let phase: f64 = rng.random::<f64>() * std::f64::consts::TAU;
            let cycles = 1.0 + rng.random::<f64>() * 1.5;
            let amp = if b + 1 == spec.layers.len() {
                0.0 // image bottom stays flat
            } else {
                spec.interface_wave_px
            };
            let curve = (0..spec.width)
                .map(|x| {
                    let t = x as f64 / spec.width as f64;
                    (base + amp * (std::f64::consts::TAU * cycles * t + phase).sin())
                        .clamp(1.0, (spec.height - 1) as f64)
                })
                .collect();
            boundaries.push(curve);
        }
        Ok(Geometry { boundaries })
    }

    fn layer_index(&self, x: usize, y: usize) -> usize {
        for (b, curve) in self.boundaries.iter().enumerate() {
            if (y as f64) <= curve[x] {
                return b;
            }
        }
        self.boundaries.len() - 1
    }

    fn inside_inclusion(spec: &PhantomSpec, x: usize, y: usize) -> bool {
        match &spec.inclusion {
            Some(inc) => {
                let dx = x as f64 - inc.center_x;
                let dy = y as f64 - inc.center_y;
                dx * dx + dy * dy <= inc.radius * inc.radius
            }
            None => false,
        }
    }

    fn compliance(&self, spec: &PhantomSpec, x: usize, y: usize) -> f64 {
        if Self::inside_inclusion(spec, x, y) {
            spec.inclusion.as_ref().map(|i| i.compliance).unwrap_or(0.0)
        } else {
            spec.layers[self.layer_index(x, y)].compliance
        }
    }
}

/// Rendered phantom: image, rigid-inclusion mask (0/255) and the layer
/// interface polylines used by the localization metric.
pub struct RenderedPhantom {
    pub image: Image,
    pub mask: Image,
    pub interfaces: Vec<Vec<(f64, f64)>>,
}

pub fn render_phantom(spec: &PhantomSpec) -> Result<RenderedPhantom> {
    let geo = Geometry::build(spec)?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);

    // smoothed multiplicative speckle, one noise plane for the whole image
    let mut noise: Vec<f64> = (0..w * h).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    noise = gaussian_blur_plane(&noise, w, h, 1.0);

    let mut plane = vec![0.0f64; w * h];
    let mut mask = Image::filled(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let layer = &spec.layers[geo.layer_index(x, y)];
            let mut v = layer.mean_intensity * (1.0 + layer.speckle_amplitude * noise[y * w + x]);

            // bright ridge with a smooth profile at each internal interface
            for curve in &geo.boundaries[..geo.boundaries.len().saturating_sub(1)] {
                let d = y as f64 - curve[x];
                if d.abs() <= 4.0 {
                    v += (215.0 - v).max(0.0) * (-d * d / 2.0).exp();
                }
            }

            if let Some(inc) = &spec.inclusion {
                let ddx = x as f64 - inc.center_x;
                let ddy = y as f64 - inc.center_y;
                let d = (ddx * ddx + ddy * ddy).sqrt();
                if d <= inc.radius {
                    // bright reflective surface arc on top, dim interior
                    if inc.radius - d <= 2.0 && ddy <= 0.5 {
                        v = inc.intensity;
                    } else {
                        v = 0.35 * layer.mean_intensity;
                    }
                    mask.set(x, y, 255.0);
                } else if ddx.abs() <= inc.radius && y as f64 > inc.center_y {
                    // acoustic shadow below the reflector
                    v *= 0.4;
                }
            }
            plane[y * w + x] = v.clamp(0.0, 255.0);
        }
    }
    // light post-blur, as B-mode imaging never has pixel-sharp edges
    plane = gaussian_blur_plane(&plane, w, h, 0.7);
    let mut img = Image::filled(w, h, 0.0);
    for (dst, &src) in img.data_mut().iter_mut().zip(&plane) {
        *dst = src as f32;
    }

    let interfaces = geo.boundaries[..geo.boundaries.len().saturating_sub(1)]
        .iter()
        .map(|curve| {
            (0..w)
                .map(|x| (x as f64, curve[x]))
                .collect::<Vec<(f64, f64)>>()
        })
        .collect();

    Ok(RenderedPhantom {
        image: img.quantize(),
        mask,
        interfaces,
    })
}

/// Linear-in-depth axial field: `dy(x, y) = max_disp_px * y / (H - 1)`,
/// zero at the top row, `max_disp_px` at the bottom; dx identically zero.
/// Pass a negative displacement for the upward correction of a compressed
/// image.
pub fn make_axial_ramp_field(width: usize, height: usize, max_disp_px: f64) -> FlowField {
    let mut f = FlowField::zeros(width, height);
    for y in 0..height {
        let dy = max_disp_px * y as f64 / (height - 1) as f64;
        for x in 0..width {
            f.set(x, y, 0.0, dy);
        }
    }
    f
}

/// Random elastic distortion: per-channel uniform noise in [-1, 1] smoothed
/// by a Gaussian of std `sigma`, then rescaled so the largest displacement
/// magnitude equals `alpha` pixels. Deterministic given the seed.
pub fn make_elastic_field(
    width: usize,
    height: usize,
    alpha: f64,
    sigma: f64,
    seed: u64,
) -> Result<FlowField> {
    if alpha < 0.0 || sigma <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "elastic field needs alpha >= 0 and sigma > 0, got {alpha}, {sigma}"
        )));
    }
    if alpha == 0.0 {
        return Ok(FlowField::zeros(width, height));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dx: Vec<f64> = (0..width * height)
        .map(|_| rng.random::<f64>() * 2.0 - 1.0)
        .collect();
    let mut dy: Vec<f64> = (0..width * height)
        .map(|_| rng.random::<f64>() * 2.0 - 1.0)
        .collect();
    dx = gaussian_blur_plane(&dx, width, height, sigma);
    dy = gaussian_blur_plane(&dy, width, height, sigma);
    let max_mag = dx
        .iter()
        .zip(&dy)
        .map(|(&a, &b)| (a * a + b * b).sqrt())
        .fold(0.0, f64::max);
    if max_mag > 0.0 {
        let s = alpha / max_mag;
        for v in dx.iter_mut().chain(dy.iter_mut()) {
            *v *= s;
        }
    }
    FlowField::from_components(width, height, dx, dy)
}

/// Applies a contact force to a rendered phantom.
///
/// The axial displacement accumulates per column from the surface downward,
/// `u(x, y) = force * sum_{y' <= y} compliance(x, y')`, zero inside the rigid
/// inclusion so all of its pixels share one displacement per column; a small
/// lateral bulge follows the lateral gradient of the axial field. The
/// returned ground-truth flow maps deformed -> original; the deformed image
/// is the original warped by the numerically inverted field (fixed point,
/// <= 20 iterations, tol 0.05 px).
pub fn simulate_compression(
    spec: &PhantomSpec,
    image: &Image,
    force_n: f64,
) -> Result<(Image, FlowField)> {
    if force_n < 0.0 {
        return Err(Error::InvalidInput(format!("negative force {force_n}")));
    }
    if image.width() != spec.width || image.height() != spec.height {
        return Err(Error::shape(
            "simulate_compression",
            format!("{}x{}", spec.width, spec.height),
            format!("{}x{}", image.width(), image.height()),
        ));
    }
    let gt = compression_field(spec, force_n)?;
    if force_n == 0.0 {
        return Ok((image.clone(), gt));
    }
    let inverse = invert_flow(&gt, 20, 0.05);
    let deformed = warp(image, &inverse)?;
    Ok((deformed.quantize(), gt))
}

/// The correction field for a given force, without rendering the image.
pub fn compression_field(spec: &PhantomSpec, force_n: f64) -> Result<FlowField> {
    let geo = Geometry::build(spec)?;
    let (w, h) = (spec.width, spec.height);
    let mut f = FlowField::zeros(w, h);
    if force_n == 0.0 {
        return Ok(f);
    }
    // per-column accumulation: material at depth y moves up by force * cumsum
    for x in 0..w {
        let mut acc = 0.0;
        for y in 0..h {
            acc += geo.compliance(spec, x, y);
            f.dy_mut()[y * w + x] = -force_n * acc;
        }
    }
    // lateral bulge from the lateral gradient of the axial displacement
    if spec.lateral_coeff != 0.0 {
        let mut lat = vec![0.0f64; w * h];
        for y in 0..h {
            for x in 1..w - 1 {
                let i = y * w + x;
                lat[i] = spec.lateral_coeff * 0.5 * (f.dy()[i + 1] - f.dy()[i - 1]);
            }
        }
        lat = gaussian_blur_plane(&lat, w, h, 1.5);
        f.dx_mut().copy_from_slice(&lat);
    }
    Ok(f)
}

/// Training-time augmentation: optional horizontal flip (negating the
/// lateral flow channel) followed by a seeded random crop of full height.
pub fn augment(
    image: &Image,
    flow: &FlowField,
    crop_width: usize,
    flip: bool,
    seed: u64,
) -> Result<(Image, FlowField)> {
    let (w, h) = (image.width(), image.height());
    if flow.width() != w || flow.height() != h {
        return Err(Error::shape(
            "augment",
            format!("{}x{}", w, h),
            format!("{}x{}", flow.width(), flow.height()),
        ));
    }
    if crop_width > w || crop_width < 2 {
        return Err(Error::InvalidInput(format!(
            "crop width {crop_width} invalid for image width {w}"
        )));
    }
    let (mut img, mut fl) = (image.clone(), flow.clone());
    if flip {
        let mut fi = Image::filled(w, h, 0.0);
        let mut ff = FlowField::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                let sx = w - 1 - x;
                fi.set(x, y, img.get(sx, y));
                let (dx, dy) = fl.get(sx, y);
                ff.set(x, y, -dx, dy);
            }
        }
        img = fi;
        fl = ff;
    }
    let x0 = if crop_width == w {
        0
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.random_range(0..=(w - crop_width))
    };
    let mut ci = Image::filled(crop_width, h, 0.0);
    let mut cf = FlowField::zeros(crop_width, h);
    for y in 0..h {
        for x in 0..crop_width {
            ci.set(x, y, img.get(x0 + x, y));
            let (dx, dy) = fl.get(x0 + x, y);
            cf.set(x, y, dx, dy);
        }
    }
    Ok((ci, cf))
}

/// Left fold of flow composition over a chain of pairwise fields, producing
/// the uncompressed -> current field from externally computed increments.
pub fn build_gt_flow(chain: &[FlowField]) -> Result<FlowField> {
    let first = chain
        .first()
        .ok_or_else(|| Error::InvalidInput("empty flow chain".into()))?;
    let mut acc = first.clone();
    for next in &chain[1..] {
        acc = compose_flows(&acc, next)?;
    }
    Ok(acc)
}

/// Separable Gaussian blur with replicated borders; kernel radius 3 sigma.
pub fn gaussian_blur_plane(data: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-(i as f64 * i as f64) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }

    let mut tmp = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sx = (x as isize + ki as isize - radius).clamp(0, width as isize - 1);
                acc += k * data[y * width + sx as usize];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sy = (y as isize + ki as isize - radius).clamp(0, height as isize - 1);
                acc += k * tmp[sy as usize * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// A four-layer forearm-like default phantom used by tests and the dataset
/// generator; geometry varies with the seed.
pub fn default_phantom_spec(width: usize, height: usize, seed: u64) -> PhantomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdefc0d);
    let rx = inclusion_radius(width, height);
    let cx = rng.random_range(0.25..0.75) * width as f64;
    let cy = rng.random_range(0.60..0.75) * height as f64;
    PhantomSpec {
        width,
        height,
        // compliance concentrates superficially, as subcutaneous tissue
        // compresses far more than muscle; depth-linear scaling is a poor
        // model of this profile on purpose
        layers: vec![
            LayerSpec {
                depth_fraction: 0.22 + 0.04 * rng.random::<f64>(),
                compliance: 3.0,
                mean_intensity: 165.0,
                speckle_amplitude: 0.09,
            },
            LayerSpec {
                depth_fraction: 0.48 + 0.05 * rng.random::<f64>(),
                compliance: 1.1,
                mean_intensity: 95.0,
                speckle_amplitude: 0.11,
            },
            LayerSpec {
                depth_fraction: 0.74 + 0.04 * rng.random::<f64>(),
                compliance: 0.5,
                mean_intensity: 135.0,
                speckle_amplitude: 0.09,
            },
            LayerSpec {
                depth_fraction: 1.0,
                compliance: 0.25,
                mean_intensity: 70.0,
                speckle_amplitude: 0.10,
            },
        ],
        inclusion: Some(InclusionSpec {
            center_x: cx.clamp(rx + 2.0, width as f64 - rx - 3.0),
            center_y: cy.clamp(rx + 2.0, height as f64 - rx - 3.0),
            radius: rx,
            intensity: 235.0,
            compliance: 0.0,
        }),
        interface_wave_px: 0.02 * height as f64,
        lateral_coeff: 0.1,
        rng_seed: seed,
    }
}

fn inclusion_radius(width: usize, height: usize) -> f64 {
    (width.min(height) as f64 * 0.12).max(4.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ncc;

    #[test]
    fn ramp_field_values() {
        let f = make_axial_ramp_field(4, 385, 70.0);
        assert_eq!(f.get(0, 0), (0.0, 0.0));
        assert_eq!(f.get(2, 384).1, 70.0);
        assert!((f.get(1, 192).1 - 35.0).abs() < 0.1);
        let z = make_axial_ramp_field(4, 8, 0.0);
        assert!(z.dy().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn elastic_field_deterministic_and_zero_alpha() {
        let a = make_elastic_field(20, 16, 5.0, 3.0, 42).unwrap();
        let b = make_elastic_field(20, 16, 5.0, 3.0, 42).unwrap();
        assert_eq!(a, b);
        assert!((a.max_magnitude() - 5.0).abs() < 1e-9);
        let z = make_elastic_field(20, 16, 0.0, 3.0, 42).unwrap();
        assert_eq!(z.max_magnitude(), 0.0);
    }

    #[test]
    fn render_is_deterministic() {
        let spec = default_phantom_spec(64, 80, 11);
        let a = render_phantom(&spec).unwrap();
        let b = render_phantom(&spec).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn zero_speckle_gives_flat_layers() {
        let mut spec = default_phantom_spec(64, 80, 3);
        spec.inclusion = None;
        spec.interface_wave_px = 0.0;
        for layer in &mut spec.layers {
            layer.speckle_amplitude = 0.0;
        }
        let r = render_phantom(&spec).unwrap();
        // interior pixels far from any interface equal the layer mean
        assert_eq!(r.image.get(10, 78), 70.0);
        assert_eq!(r.image.get(30, 30), 95.0);
    }

    #[test]
    fn mask_area_close_to_analytic_disk() {
        let spec = default_phantom_spec(96, 128, 5);
        let r = render_phantom(&spec).unwrap();
        let count = r.mask.data().iter().filter(|&&v| v > 0.0).count() as f64;
        let radius = spec.inclusion.as_ref().unwrap().radius;
        let analytic = std::f64::consts::PI * radius * radius;
        assert!(
            (count - analytic).abs() / analytic < 0.02,
            "count {count} vs analytic {analytic}"
        );
    }

    #[test]
    fn inclusion_out_of_bounds_rejected() {
        let mut spec = default_phantom_spec(64, 64, 1);
        spec.inclusion.as_mut().unwrap().center_y = 62.0;
        assert!(render_phantom(&spec).is_err());
    }

    #[test]
    fn zero_force_is_exact_identity() {
        let spec = default_phantom_spec(48, 64, 9);
        let r = render_phantom(&spec).unwrap();
        let (deformed, gt) = simulate_compression(&spec, &r.image, 0.0).unwrap();
        assert_eq!(deformed, r.image);
        assert!(gt.dx().iter().all(|&v| v == 0.0));
        assert!(gt.dy().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn displacement_monotone_in_force() {
        let spec = default_phantom_spec(48, 64, 9)
            .scaled_to_column_compliance(2.0)
            .unwrap();
        let mut prev = -1.0;
        for force in 1..=6 {
            let f = compression_field(&spec, force as f64).unwrap();
            let mean_dy =
                f.dy().iter().map(|v| v.abs()).sum::<f64>() / f.dy().len() as f64;
            assert!(mean_dy > prev, "force {force}: {mean_dy} vs {prev}");
            prev = mean_dy;
        }
    }

    #[test]
    fn rigid_inclusion_columns_have_constant_displacement() {
        let spec = default_phantom_spec(64, 96, 21)
            .scaled_to_column_compliance(2.5)
            .unwrap();
        let inc = spec.inclusion.clone().unwrap();
        let f = compression_field(&spec, 5.0).unwrap();
        let x = inc.center_x.round() as usize;
        let y0 = (inc.center_y - inc.radius + 1.0).ceil() as usize;
        let y1 = (inc.center_y + inc.radius - 1.0).floor() as usize;
        let column: Vec<f64> = (y0..=y1).map(|y| f.get(x, y).1).collect();
        let spread = column
            .iter()
            .fold(0.0f64, |acc, &v| acc.max((v - column[0]).abs()));
        assert!(spread < 1e-9, "spread {spread}");
    }

    #[test]
    fn simulated_sample_is_self_consistent() {
        let spec = default_phantom_spec(96, 128, 33)
            .scaled_to_column_compliance(3.0)
            .unwrap();
        let r = render_phantom(&spec).unwrap();
        let (deformed, gt) = simulate_compression(&spec, &r.image, 6.0).unwrap();
        let recovered = warp(&deformed, &gt).unwrap();
        let score = ncc(&recovered, &r.image).unwrap();
        assert!(score >= 0.95, "recovery NCC {score}");
        let deformed_score = ncc(&deformed, &r.image).unwrap();
        assert!(deformed_score < score);
    }

    #[test]
    fn augment_flip_is_involution() {
        let spec = default_phantom_spec(40, 56, 2);
        let r = render_phantom(&spec).unwrap();
        let f = compression_field(
            &spec
                .clone()
                .scaled_to_column_compliance(2.0)
                .unwrap(),
            3.0,
        )
        .unwrap();
        let (i1, f1) = augment(&r.image, &f, 40, true, 0).unwrap();
        let (i2, f2) = augment(&i1, &f1, 40, true, 0).unwrap();
        assert_eq!(i2, r.image);
        for i in 0..f.dx().len() {
            assert!((f2.dx()[i] - f.dx()[i]).abs() < 1e-12);
            assert!((f2.dy()[i] - f.dy()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn flip_of_axial_field_keeps_dy() {
        let f = make_axial_ramp_field(12, 16, -5.0);
        let img = Image::filled(12, 16, 100.0);
        let (_, flipped) = augment(&img, &f, 12, true, 0).unwrap();
        for y in 0..16 {
            for x in 0..12 {
                let (dx, dy) = flipped.get(x, y);
                assert_eq!(dx, 0.0);
                assert_eq!(dy, f.get(x, y).1);
            }
        }
    }

    #[test]
    fn crop_keeps_height_and_respects_bounds() {
        let spec = default_phantom_spec(40, 56, 2);
        let r = render_phantom(&spec).unwrap();
        let f = FlowField::zeros(40, 56);
        let (ci, cf) = augment(&r.image, &f, 32, false, 77).unwrap();
        assert_eq!(ci.width(), 32);
        assert_eq!(ci.height(), 56);
        assert_eq!(cf.width(), 32);
        assert!(augment(&r.image, &f, 41, false, 0).is_err());
    }

    #[test]
    fn augment_preserves_warp_relation() {
        let spec = default_phantom_spec(64, 80, 13)
            .scaled_to_column_compliance(2.0)
            .unwrap();
        let r = render_phantom(&spec).unwrap();
        let (deformed, gt) = simulate_compression(&spec, &r.image, 4.0).unwrap();
        let (aug_def, aug_flow) = augment(&deformed, &gt, 64, true, 0).unwrap();
        let (aug_orig, _) = augment(&r.image, &gt, 64, true, 0).unwrap();
        let rec = warp(&aug_def, &aug_flow).unwrap();
        let mean_err = rec
            .data()
            .iter()
            .zip(aug_orig.data())
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / rec.data().len() as f64;
        assert!(mean_err <= 2.0, "mean abs err {mean_err}");
    }

    #[test]
    fn gt_chain_fold() {
        let a = make_axial_ramp_field(16, 16, -2.0);
        let b = make_axial_ramp_field(16, 16, -3.0);
        let single = build_gt_flow(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single, a);
        let chained = build_gt_flow(&[a.clone(), b.clone()]).unwrap();
        // interior of the composition tracks the ramp sum
        for y in 2..14 {
            let (_, dy) = chained.get(8, y);
            let expect = a.get(8, y).1 + b.get(8, (y as f64 + a.get(8, y).1) as usize).1;
            assert!((dy - expect).abs() < 0.3, "y {y}: {dy} vs {expect}");
        }
        let zeros = vec![FlowField::zeros(8, 8); 3];
        let z = build_gt_flow(&zeros).unwrap();
        assert_eq!(z, FlowField::zeros(8, 8));
    }
}
