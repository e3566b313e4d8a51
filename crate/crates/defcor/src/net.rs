//! The coarse-to-fine corrector: a weight-shared U-shape stiffness
//! extractor, a per-layer patient-specific stiffness update, and polynomial
//! regression of the displacement field against the contact force.
//!
//! Layer 1 runs on the quarter-resolution image with a quadratic regression
//! to capture the bulk deformation; layers 2 and 3 warp the half- and
//! full-resolution images by the upsampled field so far and regress linear
//! residuals. Every displacement is proportional to the contact force, so a
//! zero force yields an exactly zero field regardless of the parameters.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calib::{zscore, StiffnessPopulation};
use crate::error::{Error, Result};
use crate::flow::{warp, FlowField};
use crate::image::Image;
use crate::tape::{Shape, Tape, Var};

/// Architecture knobs; the encoder widths are configurable because desk
/// scale uses a much smaller extractor than a clinical deployment would.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Encoder channel widths per level.
    pub channels: [usize; 3],
    /// LeakyReLU negative slope.
    pub leaky_slope: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            channels: [8, 16, 32],
            leaky_slope: 0.01,
        }
    }
}

/// One named parameter blob.
#[derive(Clone, Debug)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f64>,
}

/// All learnable state plus the stiffness population recorded at training
/// time. Parameter values are kept exactly representable in f32 so that
/// checkpoints round-trip bit-exactly.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: NetConfig,
    pub tensors: Vec<ParamTensor>,
    pub population: Option<StiffnessPopulation>,
}

/// Dense per-pixel stiffness surrogate produced by the extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct StiffnessMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ModelParams {
    /// He-uniform convolutions, stiffness updates at (1, 0.1, 0), zeroed
    /// regression coefficients: the untrained model is the identity
    /// corrector.
    pub fn init(config: NetConfig, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c0, c1, c2] = config.channels;
        let mut tensors = Vec::new();

        let mut conv = |name: &str, in_c: usize, out_c: usize, k: usize| {
            let fan_in = (in_c * k * k) as f64;
            let limit = (6.0 / fan_in).sqrt();
            let data: Vec<f64> = (0..out_c * in_c * k * k)
                .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * limit)
                .collect();
            tensors.push(ParamTensor {
                name: format!("{name}.w"),
                shape: Shape::new(out_c, in_c, k * k),
                data,
            });
            tensors.push(ParamTensor {
                name: format!("{name}.b"),
                shape: Shape::new(out_c, 1, 1),
                data: vec![0.0; out_c],
            });
        };
        conv("ushape.enc1a", 1, c0, 3);
        conv("ushape.enc1b", c0, c0, 3);
        conv("ushape.enc2a", c0, c1, 3);
        conv("ushape.enc2b", c1, c1, 3);
        conv("ushape.enc3a", c1, c2, 3);
        conv("ushape.enc3b", c2, c2, 3);
        conv("ushape.dec2a", c2 + c1, c1, 3);
        conv("ushape.dec2b", c1, c1, 3);
        conv("ushape.dec1a", c1 + c0, c0, 3);
        conv("ushape.dec1b", c0, c0, 3);
        conv("ushape.out", c0, 1, 1);

        for layer in 1..=3 {
            for (cname, value) in [("c1", 1.0), ("c2", 0.1), ("c3", 0.0)] {
                tensors.push(ParamTensor {
                    name: format!("update{layer}.{cname}"),
                    shape: Shape::scalar(),
                    data: vec![value],
                });
            }
        }
        for layer in 1..=3 {
            let width = if layer == 1 { 3 } else { 2 };
            for comp in ["kx", "ky"] {
                tensors.push(ParamTensor {
                    name: format!("dfm{layer}.{comp}"),
                    shape: Shape::new(1, 1, width),
                    data: vec![0.0; width],
                });
            }
        }

        let mut params = ModelParams {
            config,
            tensors,
            population: None,
        };
        params.quantize_f32();
        params
    }

    /// Rounds every parameter to the nearest f32; the invariant behind
    /// bit-exact checkpointing and resume.
    pub fn quantize_f32(&mut self) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> usize {
        self.tensors
            .iter()
            .position(|t| t.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn tensor(&self, name: &str) -> &ParamTensor {
        &self.tensors[self.index_of(name)]
    }
}

/// A 2-channel flow held as two tape nodes.
#[derive(Clone, Copy)]
pub struct FlowVars {
    pub dx: Var,
    pub dy: Var,
}

/// The differentiable forward graph plus handles to everything training
/// and evaluation read back.
pub struct ForwardGraph {
    pub tape: Tape,
    /// Leaves aligned with `ModelParams::tensors`.
    pub param_vars: Vec<Var>,
    /// Supervised per-scale fields: quarter, half, full resolution.
    pub scale_flows: [FlowVars; 3],
    /// Updated stiffness maps per layer, at that layer's resolution.
    pub stiffness: [Var; 3],
    /// Full-resolution normalized input intensities (for the edge-aware
    /// smoothness term).
    pub input_norm: Vec<f64>,
    pub width: usize,
    pub height: usize,
}

impl ForwardGraph {
    pub fn final_flow(&self) -> FlowVars {
        self.scale_flows[2]
    }

    fn flow_field(&self, fv: FlowVars) -> FlowField {
        let s = self.tape.shape(fv.dx);
        FlowField::from_components(
            s.w,
            s.h,
            self.tape.value(fv.dx).to_vec(),
            self.tape.value(fv.dy).to_vec(),
        )
        .expect("tape shapes are consistent")
    }

    fn stiffness_map(&self, v: Var) -> StiffnessMap {
        let s = self.tape.shape(v);
        StiffnessMap {
            width: s.w,
            height: s.h,
            data: self.tape.value(v).to_vec(),
        }
    }
}

/// Extracted values of one forward pass.
pub struct ForwardResult {
    /// Final full-resolution field f_32.
    pub flow: FlowField,
    /// Quarter-resolution field of layer 1.
    pub f11: FlowField,
    /// Half-resolution residual of layer 2.
    pub f21: FlowField,
    /// Supervised per-scale fields (f_11, f_12 + f_21, f_32).
    pub scale_flows: [FlowField; 3],
    /// Updated stiffness maps per layer.
    pub stiffness: [StiffnessMap; 3],
}

/// Builds the full differentiable graph for one image.
pub fn build_forward(
    image: &Image,
    force_n: f64,
    k_g_n: f64,
    params: &ModelParams,
) -> Result<ForwardGraph> {
    let (w, h) = (image.width(), image.height());
    if w % 16 != 0 || h % 16 != 0 {
        // two pyramid downsamplings plus two pooling levels in the extractor
        return Err(Error::NonDivisible {
            context: "forward",
            w,
            h,
            factor: 16,
        });
    }
    let mut tape = Tape::new();
    let param_vars: Vec<Var> = params
        .tensors
        .iter()
        .map(|t| tape.leaf(t.shape, t.data.clone()))
        .collect();
    let net = NetVars::bind(params, &param_vars);
    let slope = params.config.leaky_slope;

    let full: Vec<f64> = image.data().iter().map(|&v| v as f64 / 255.0).collect();
    let half = resize_plane(&full, w, h, w / 2, h / 2);
    let quarter = resize_plane(&full, w, h, w / 4, h / 4);

    // layer 1: quarter resolution, quadratic regression
    let q_var = tape.leaf(Shape::plane(h / 4, w / 4), quarter);
    let k1 = ushape(&mut tape, &net, q_var, slope);
    let k1g = stiffness_update(&mut tape, &net, 0, k1, k_g_n, slope);
    let f11 = dfm(&mut tape, &net, 0, k1g, force_n);
    let f12 = upscale_flow(&mut tape, f11);

    // layer 2: half resolution warped by the base field, linear residual
    let warped2_dx = f12.dx;
    let w2 = tape.warp_image(&half, warped2_dx, f12.dy);
    let k2 = ushape(&mut tape, &net, w2, slope);
    let k2g = stiffness_update(&mut tape, &net, 1, k2, k_g_n, slope);
    let f21 = dfm(&mut tape, &net, 1, k2g, force_n);
    let f22 = FlowVars {
        dx: tape.add(f12.dx, f21.dx),
        dy: tape.add(f12.dy, f21.dy),
    };
    let f23 = upscale_flow(&mut tape, f22);

    // layer 3: full resolution
    let w3 = tape.warp_image(&full, f23.dx, f23.dy);
    let k3 = ushape(&mut tape, &net, w3, slope);
    let k3g = stiffness_update(&mut tape, &net, 2, k3, k_g_n, slope);
    let f31 = dfm(&mut tape, &net, 2, k3g, force_n);
    let f32_ = FlowVars {
        dx: tape.add(f23.dx, f31.dx),
        dy: tape.add(f23.dy, f31.dy),
    };

    Ok(ForwardGraph {
        tape,
        param_vars,
        scale_flows: [f11, f22, f32_],
        stiffness: [k1g, k2g, k3g],
        input_norm: full,
        width: w,
        height: h,
    })
}

/// Runs the model and extracts plain values.
pub fn forward(
    image: &Image,
    force_n: f64,
    k_g_n: f64,
    params: &ModelParams,
) -> Result<ForwardResult> {
    let graph = build_forward(image, force_n, k_g_n, params)?;
    let [f1, f2, f3] = graph.scale_flows;
    let f12 = graph.flow_field(f1);
    let f22 = graph.flow_field(f2);
    let f32_ = graph.flow_field(f3);
    // residual of layer 2 = combined minus upsampled base
    let up = crate::flow::scale_flow_up(&f12, 2)?;
    let mut f21 = f22.clone();
    for i in 0..f21.dx().len() {
        f21.dx_mut()[i] -= up.dx()[i];
        f21.dy_mut()[i] -= up.dy()[i];
    }
    Ok(ForwardResult {
        flow: f32_.clone(),
        f11: f12,
        f21,
        scale_flows: [graph.flow_field(f1), f22, f32_],
        stiffness: [
            graph.stiffness_map(graph.stiffness[0]),
            graph.stiffness_map(graph.stiffness[1]),
            graph.stiffness_map(graph.stiffness[2]),
        ],
    })
}

/// Full correction path: z-scores the raw global stiffness against the
/// population recorded in the checkpoint, predicts the field and warps the
/// image back. A zero force returns the input unchanged.
pub fn correct(
    image: &Image,
    force_n: f64,
    k_g: f64,
    params: &ModelParams,
) -> Result<(Image, FlowField)> {
    let pop = params.population.as_ref().ok_or_else(|| {
        Error::Checkpoint("no stiffness population recorded in the model".into())
    })?;
    let k_g_n = zscore(k_g, pop)?;
    let result = forward(image, force_n, k_g_n, params)?;
    let corrected = warp(image, &result.flow)?;
    Ok((corrected, result.flow))
}

/// Runs only the shared extractor on one image at its native resolution:
/// `K_us = LeakyReLU(UNET(I))`. Dimensions must be divisible by 4.
pub fn stiffness_map(image: &Image, params: &ModelParams) -> Result<StiffnessMap> {
    let (w, h) = (image.width(), image.height());
    if w % 4 != 0 || h % 4 != 0 {
        return Err(Error::NonDivisible {
            context: "stiffness_map",
            w,
            h,
            factor: 4,
        });
    }
    let mut tape = Tape::new();
    let param_vars: Vec<Var> = params
        .tensors
        .iter()
        .map(|t| tape.leaf(t.shape, t.data.clone()))
        .collect();
    let net = NetVars::bind(params, &param_vars);
    let norm: Vec<f64> = image.data().iter().map(|&v| v as f64 / 255.0).collect();
    let input = tape.leaf(Shape::plane(h, w), norm);
    let k = ushape(&mut tape, &net, input, params.config.leaky_slope);
    Ok(StiffnessMap {
        width: w,
        height: h,
        data: tape.value(k).to_vec(),
    })
}

/// Pre-resolved tensor indices to avoid name lookups in the hot path.
struct NetVars {
    conv: Vec<(Var, Var)>,
    updates: [[Var; 3]; 3],
    dfm: [(Var, Var); 3],
}

const CONV_NAMES: [&str; 11] = [
    "ushape.enc1a",
    "ushape.enc1b",
    "ushape.enc2a",
    "ushape.enc2b",
    "ushape.enc3a",
    "ushape.enc3b",
    "ushape.dec2a",
    "ushape.dec2b",
    "ushape.dec1a",
    "ushape.dec1b",
    "ushape.out",
];

impl NetVars {
    fn bind(params: &ModelParams, vars: &[Var]) -> NetVars {
        let v = |name: &str| vars[params.index_of(name)];
        let conv = CONV_NAMES
            .iter()
            .map(|n| (v(&format!("{n}.w")), v(&format!("{n}.b"))))
            .collect();
        let upd = |layer: usize| {
            [
                v(&format!("update{layer}.c1")),
                v(&format!("update{layer}.c2")),
                v(&format!("update{layer}.c3")),
            ]
        };
        let dfm = |layer: usize| {
            (
                v(&format!("dfm{layer}.kx")),
                v(&format!("dfm{layer}.ky")),
            )
        };
        NetVars {
            conv,
            updates: [upd(1), upd(2), upd(3)],
            dfm: [dfm(1), dfm(2), dfm(3)],
        }
    }
}

/// The shared 3-level encoder-decoder; output has the input's plane dims.
fn ushape(tape: &mut Tape, net: &NetVars, input: Var, slope: f64) -> Var {
    let conv = |tape: &mut Tape, x: Var, idx: usize, k: usize| {
        let (w, b) = net.conv[idx];
        tape.conv2d(x, w, b, k)
    };
    let act = |tape: &mut Tape, x: Var| tape.leaky_relu(x, slope);

    let mut e1 = conv(tape, input, 0, 3);
    e1 = act(tape, e1);
    e1 = conv(tape, e1, 1, 3);
    e1 = act(tape, e1);

    let p1 = tape.avg_pool2(e1);
    let mut e2 = conv(tape, p1, 2, 3);
    e2 = act(tape, e2);
    e2 = conv(tape, e2, 3, 3);
    e2 = act(tape, e2);

    let p2 = tape.avg_pool2(e2);
    let mut e3 = conv(tape, p2, 4, 3);
    e3 = act(tape, e3);
    e3 = conv(tape, e3, 5, 3);
    e3 = act(tape, e3);

    let u2 = tape.upsample2(e3);
    let cat2 = tape.concat(u2, e2);
    let mut d2 = conv(tape, cat2, 6, 3);
    d2 = act(tape, d2);
    d2 = conv(tape, d2, 7, 3);
    d2 = act(tape, d2);

    let u1 = tape.upsample2(d2);
    let cat1 = tape.concat(u1, e1);
    let mut d1 = conv(tape, cat1, 8, 3);
    d1 = act(tape, d1);
    d1 = conv(tape, d1, 9, 3);
    d1 = act(tape, d1);

    let out = conv(tape, d1, 10, 1);
    // the stiffness surrogate itself passes through LeakyReLU as well
    tape.leaky_relu(out, slope)
}

/// `K_us^g = LeakyReLU(c1 * K_us + c2 * k_g_n + c3)`, elementwise.
fn stiffness_update(
    tape: &mut Tape,
    net: &NetVars,
    layer: usize,
    k_us: Var,
    k_g_n: f64,
    slope: f64,
) -> Var {
    let [c1, c2, c3] = net.updates[layer];
    let scaled = tape.broadcast_mul(k_us, c1);
    let global = tape.scale(c2, k_g_n);
    let shifted = tape.broadcast_add(scaled, global);
    let shifted = tape.broadcast_add(shifted, c3);
    tape.leaky_relu(shifted, slope)
}

/// Per-pixel polynomial regression against the contact force. The basis is
/// `[h^2, h, 1]` for the quadratic layer and `[h, 1]` for the linear ones;
/// zero force therefore yields an exactly zero field.
fn dfm(tape: &mut Tape, net: &NetVars, layer: usize, kmap: Var, force_n: f64) -> FlowVars {
    let (kx, ky) = net.dfm[layer];
    let width = tape.shape(kx).len();
    let mut component = |coeffs: Var| -> Var {
        let mut field = if width == 3 {
            let h2 = tape.mul(kmap, kmap);
            let k0 = tape.index(coeffs, 0);
            let k1 = tape.index(coeffs, 1);
            let t0 = tape.broadcast_mul(h2, k0);
            let t1 = tape.broadcast_mul(kmap, k1);
            tape.add(t0, t1)
        } else {
            let k0 = tape.index(coeffs, 0);
            tape.broadcast_mul(kmap, k0)
        };
        let konst = tape.index(coeffs, width - 1);
        field = tape.broadcast_add(field, konst);
        tape.scale(field, force_n)
    };
    FlowVars {
        dx: component(kx),
        dy: component(ky),
    }
}

/// Bilinear 2x upsampling with vectors doubled to stay in pixel units.
fn upscale_flow(tape: &mut Tape, f: FlowVars) -> FlowVars {
    let ux = tape.upsample2(f.dx);
    let uy = tape.upsample2(f.dy);
    FlowVars {
        dx: tape.scale(ux, 2.0),
        dy: tape.scale(uy, 2.0),
    }
}

/// Align-corners bilinear resize of an f64 plane.
pub(crate) fn resize_plane(
    data: &[f64],
    w: usize,
    h: usize,
    nw: usize,
    nh: usize,
) -> Vec<f64> {
    let sx = if nw <= 1 {
        0.0
    } else {
        (w - 1) as f64 / (nw - 1) as f64
    };
    let sy = if nh <= 1 {
        0.0
    } else {
        (h - 1) as f64 / (nh - 1) as f64
    };
    let mut out = vec![0.0; nw * nh];
    for y in 0..nh {
        let cy = y as f64 * sy;
        let y0 = cy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = cy - y0 as f64;
        for x in 0..nw {
            let cx = x as f64 * sx;
            let x0 = cx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = cx - x0 as f64;
            out[y * nw + x] = (1.0 - fy)
                * ((1.0 - fx) * data[y0 * w + x0] + fx * data[y0 * w + x1])
                + fy * ((1.0 - fx) * data[y1 * w + x0] + fx * data[y1 * w + x1]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{default_phantom_spec, render_phantom};

    fn small_image(w: usize, h: usize, seed: u64) -> Image {
        let data = crate::gradcheck::random_buffer(w * h, seed)
            .into_iter()
            .map(|v| ((v + 1.0) * 127.5) as f32)
            .collect();
        Image::from_vec(w, h, data).unwrap()
    }

    #[test]
    fn zero_force_gives_exactly_zero_field() {
        let params = ModelParams::init(NetConfig::default(), 3);
        let img = small_image(16, 16, 5);
        let out = forward(&img, 0.0, 1.3, &params).unwrap();
        assert!(out.flow.dx().iter().all(|&v| v == 0.0));
        assert!(out.flow.dy().iter().all(|&v| v == 0.0));
        assert!(out.f11.dx().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_dims_match_input() {
        let params = ModelParams::init(NetConfig::default(), 3);
        for (w, h) in [(16, 32), (32, 16), (48, 48)] {
            let img = small_image(w, h, 7);
            let out = forward(&img, 2.0, 0.4, &params).unwrap();
            assert_eq!(out.flow.width(), w);
            assert_eq!(out.flow.height(), h);
            assert_eq!(out.f11.width(), w / 4);
            assert_eq!(out.f21.width(), w / 2);
            assert_eq!(out.stiffness[0].width, w / 4);
            assert_eq!(out.stiffness[2].height, h);
        }
    }

    #[test]
    fn non_divisible_dims_rejected() {
        let params = ModelParams::init(NetConfig::default(), 3);
        let img = small_image(20, 16, 7);
        assert!(forward(&img, 1.0, 0.0, &params).is_err());
        let img2 = small_image(20, 20, 7);
        assert!(stiffness_map(&img2, &params).is_ok());
        let img3 = small_image(18, 20, 7);
        assert!(stiffness_map(&img3, &params).is_err());
    }

    #[test]
    fn stiffness_map_shape_and_zero_params() {
        let mut params = ModelParams::init(NetConfig::default(), 1);
        for t in &mut params.tensors {
            if t.name.starts_with("ushape") {
                t.data.fill(0.0);
            }
        }
        let spec = default_phantom_spec(96, 128, 7);
        let r = render_phantom(&spec).unwrap();
        let map = stiffness_map(&r.image, &params).unwrap();
        assert_eq!(map.width, 96);
        assert_eq!(map.height, 128);
        assert!(map.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stiffness_update_cases() {
        // c1=1, c2=0, c3=0 with non-negative input is the identity;
        // c1=0, c2=1, c3=0 yields a constant map of k_g_n
        let mut params = ModelParams::init(NetConfig::default(), 9);
        let set = |params: &mut ModelParams, name: &str, v: f64| {
            let i = params.index_of(name);
            params.tensors[i].data[0] = v;
        };
        set(&mut params, "update1.c1", 1.0);
        set(&mut params, "update1.c2", 0.0);
        set(&mut params, "update1.c3", 0.0);

        let mut tape = Tape::new();
        let vars: Vec<Var> = params
            .tensors
            .iter()
            .map(|t| tape.leaf(t.shape, t.data.clone()))
            .collect();
        let net = NetVars::bind(&params, &vars);
        let input = tape.leaf(Shape::new(1, 2, 2), vec![0.5, 1.0, 2.0, 0.0]);
        let out = stiffness_update(&mut tape, &net, 0, input, 2.0, 0.01);
        assert_eq!(tape.value(out), &[0.5, 1.0, 2.0, 0.0]);

        set(&mut params, "update1.c1", 0.0);
        set(&mut params, "update1.c2", 1.0);
        let mut tape = Tape::new();
        let vars: Vec<Var> = params
            .tensors
            .iter()
            .map(|t| tape.leaf(t.shape, t.data.clone()))
            .collect();
        let net = NetVars::bind(&params, &vars);
        let input = tape.leaf(Shape::new(1, 2, 2), vec![0.5, 1.0, 2.0, 0.0]);
        let out = stiffness_update(&mut tape, &net, 0, input, 2.0, 0.01);
        assert_eq!(tape.value(out), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn dfm_hand_evaluated_polynomial() {
        // Ky = [1, 2, 3], Kx = 0, h = 2, F = 2 -> dy = 2*(4+4+3) = 22
        let mut params = ModelParams::init(NetConfig::default(), 9);
        let iy = params.index_of("dfm1.ky");
        params.tensors[iy].data = vec![1.0, 2.0, 3.0];
        let mut tape = Tape::new();
        let vars: Vec<Var> = params
            .tensors
            .iter()
            .map(|t| tape.leaf(t.shape, t.data.clone()))
            .collect();
        let net = NetVars::bind(&params, &vars);
        let kmap = tape.leaf(Shape::new(1, 1, 2), vec![2.0, 2.0]);
        let out = dfm(&mut tape, &net, 0, kmap, 2.0);
        assert_eq!(tape.value(out.dy), &[22.0, 22.0]);
        assert_eq!(tape.value(out.dx), &[0.0, 0.0]);
    }

    #[test]
    fn constant_map_gives_constant_field() {
        let mut params = ModelParams::init(NetConfig::default(), 2);
        let i = params.index_of("dfm2.ky");
        params.tensors[i].data = vec![0.5, 1.0];
        let mut tape = Tape::new();
        let vars: Vec<Var> = params
            .tensors
            .iter()
            .map(|t| tape.leaf(t.shape, t.data.clone()))
            .collect();
        let net = NetVars::bind(&params, &vars);
        let kmap = tape.leaf(Shape::new(1, 4, 4), vec![1.5; 16]);
        let out = dfm(&mut tape, &net, 1, kmap, 3.0);
        let dy = tape.value(out.dy);
        assert!(dy.iter().all(|&v| (v - 3.0 * 1.75).abs() < 1e-12));
    }

    #[test]
    fn weight_sharing_one_blob_feeds_all_layers() {
        let mut params = ModelParams::init(NetConfig::default(), 4);
        // make DFM nonzero so the flows depend on the stiffness maps
        for layer in 1..=3 {
            for comp in ["kx", "ky"] {
                let i = params.index_of(&format!("dfm{layer}.{comp}"));
                for v in &mut params.tensors[i].data {
                    *v = 0.05;
                }
            }
        }
        let img = small_image(16, 16, 8);
        let base = forward(&img, 2.0, 0.5, &params).unwrap();

        let i = params.index_of("ushape.enc1a.w");
        params.tensors[i].data[0] += 0.25;
        let bumped = forward(&img, 2.0, 0.5, &params).unwrap();

        for layer in 0..3 {
            let a = &base.stiffness[layer].data;
            let b = &bumped.stiffness[layer].data;
            let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
            assert!(diff > 0.0, "layer {layer} unaffected by shared weight");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let params = ModelParams::init(NetConfig::default(), 11);
        let img = small_image(16, 32, 13);
        let a = forward(&img, 3.0, -0.7, &params).unwrap();
        let b = forward(&img, 3.0, -0.7, &params).unwrap();
        assert_eq!(a.flow, b.flow);
        assert_eq!(a.stiffness[1].data, b.stiffness[1].data);
    }

    #[test]
    fn correct_zero_force_returns_input() {
        let mut params = ModelParams::init(NetConfig::default(), 11);
        params.population = Some(StiffnessPopulation {
            mu_g: 1.2,
            delta_g: 0.4,
            n: 10,
        });
        let img = small_image(16, 16, 21).quantize();
        let (out, flow) = correct(&img, 0.0, 1.5, &params).unwrap();
        assert_eq!(out, img);
        assert!(flow.dx().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn correct_without_population_errors() {
        let params = ModelParams::init(NetConfig::default(), 11);
        let img = small_image(16, 16, 21);
        assert!(matches!(
            correct(&img, 1.0, 1.5, &params),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn end_to_end_gradient_smoke() {
        // one random parameter of each kind against central differences,
        // through the full 3-layer pipeline and an L1-style scalar
        let params = ModelParams::init(NetConfig::default(), 31);
        let img = small_image(16, 16, 33);
        let names = ["ushape.enc1a.w", "update2.c1", "dfm1.ky", "dfm3.kx"];
        for name in names {
            let idx = params.index_of(name);
            // scalar = mean(|dx|) + mean(|dy|) of the final field
            let scalar_and_grad = |p: &ModelParams| -> (f64, f64) {
                let mut g = build_forward(&img, 2.0, 0.6, p).unwrap();
                let f = g.scale_flows[2];
                let adx = g.tape.abs(f.dx);
                let ady = g.tape.abs(f.dy);
                let mx = g.tape.mean(adx);
                let my = g.tape.mean(ady);
                let total = g.tape.add(mx, my);
                let grads = g.tape.backward(total);
                let gp = grads.get(g.param_vars[idx]).map(|v| v[0]).unwrap_or(0.0);
                (g.tape.value(total)[0], gp)
            };
            let (_, analytic) = scalar_and_grad(&params);
            let h = crate::gradcheck::FD_STEP;
            let mut plus = params.clone();
            plus.tensors[idx].data[0] += h;
            let mut minus = params.clone();
            minus.tensors[idx].data[0] -= h;
            let numeric = (scalar_and_grad(&plus).0 - scalar_and_grad(&minus).0) / (2.0 * h);
            assert!(
                crate::gradcheck::fd_agree(analytic, numeric),
                "{name}: analytic {analytic} vs numeric {numeric}"
            );
        }
    }
}
