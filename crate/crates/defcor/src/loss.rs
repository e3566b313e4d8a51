//! Training objective: multi-scale L1 against the rescaled ground truth
//! plus an edge-aware first/second-order smoothness penalty on the final
//! field.
//!
//! Reductions are means (per scale, per term) so the default weights stay
//! resolution-independent. The ground truth is resized to each layer's
//! actual dims with vectors scaled by the resolution ratio.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::flow::{scale_flow_down, FlowField};
use crate::image::Image;
use crate::net::{ForwardGraph, FlowVars};
use crate::tape::{Axis, Shape, Tape, Var};

fn default_lambda1() -> f64 {
    1.0
}
fn default_lambda2() -> f64 {
    10.0
}
fn default_edge() -> [f64; 2] {
    [150.0, 150.0]
}
fn default_epsilon() -> f64 {
    1e-3
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the multi-scale L1 term.
    pub lambda1: f64,
    /// Weight of the smoothness term.
    pub lambda2: f64,
    /// Edge sensitivity along x per derivative order (k = 1, 2), applied to
    /// squared gradients of intensities normalized to [0, 1].
    pub edge_lambda_x: [f64; 2],
    /// Edge sensitivity along y per derivative order.
    pub edge_lambda_y: [f64; 2],
    /// Zero-gradient guard in f(m) = sqrt(m^2 + eps^2).
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: default_lambda1(),
            lambda2: default_lambda2(),
            edge_lambda_x: default_edge(),
            edge_lambda_y: default_edge(),
            epsilon: default_epsilon(),
        }
    }
}

/// Loss values of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossValues {
    pub total: f64,
    pub l1: f64,
    pub smoothness: f64,
}

/// Appends the full training objective to a forward graph and returns the
/// scalar output node plus its component values.
pub fn total_loss_on(
    graph: &mut ForwardGraph,
    gt: &FlowField,
    cfg: &LossConfig,
) -> Result<(Var, LossValues)> {
    let l1 = l1_multiscale_on(graph, gt)?;
    let sm = smoothness_on(graph, cfg);
    let tape = &mut graph.tape;
    let l1w = tape.scale(l1, cfg.lambda1);
    let smw = tape.scale(sm, cfg.lambda2);
    let total = tape.add(l1w, smw);
    let values = LossValues {
        total: tape.value(total)[0],
        l1: tape.value(l1)[0],
        smoothness: tape.value(sm)[0],
    };
    Ok((total, values))
}

/// Sum over the three scales of the mean per-pixel L1 norm between the
/// combined per-scale field and the correspondingly rescaled ground truth.
pub fn l1_multiscale_on(graph: &mut ForwardGraph, gt: &FlowField) -> Result<Var> {
    let gts = [
        scale_flow_down(gt, 4)?,
        scale_flow_down(gt, 2)?,
        gt.clone(),
    ];
    let scales = graph.scale_flows;
    let tape = &mut graph.tape;
    let mut total: Option<Var> = None;
    for (pred, target) in scales.iter().zip(&gts) {
        let term = l1_term(tape, *pred, target);
        total = Some(match total {
            Some(t) => tape.add(t, term),
            None => term,
        });
    }
    Ok(total.expect("three scales"))
}

fn l1_term(tape: &mut Tape, pred: FlowVars, target: &FlowField) -> Var {
    let shape = tape.shape(pred.dx);
    assert_eq!(shape.w, target.width(), "l1 scale width");
    assert_eq!(shape.h, target.height(), "l1 scale height");
    let tx = tape.leaf(shape, target.dx().to_vec());
    let ty = tape.leaf(shape, target.dy().to_vec());
    let ex = tape.sub(pred.dx, tx);
    let ey = tape.sub(pred.dy, ty);
    let ax = tape.abs(ex);
    let ay = tape.abs(ey);
    let mx = tape.mean(ax);
    let my = tape.mean(ay);
    tape.add(mx, my)
}

/// Edge-aware smoothness of the final field. For each derivative order k in
/// {1, 2} and each axis, the penalty is the mean over valid pixels and both
/// flow channels of `exp(-lambda * (dI)^2) * sqrt(d^k f^2 + eps^2)`, where
/// `dI` is the forward difference of the normalized intensities.
pub fn smoothness_on(graph: &mut ForwardGraph, cfg: &LossConfig) -> Var {
    let flow = graph.scale_flows[2];
    let (w, h) = (graph.width, graph.height);
    let img = &graph.input_norm;

    let tape = &mut graph.tape;
    let mut total: Option<Var> = None;
    for k in 1..=2u8 {
        for (axis, lambda) in [
            (Axis::X, cfg.edge_lambda_x[k as usize - 1]),
            (Axis::Y, cfg.edge_lambda_y[k as usize - 1]),
        ] {
            // image-gradient weight on the derivative's valid region:
            // co-located forward difference for k=1, central difference
            // over the window for k=2 (mirror-symmetric either way)
            let (vw, vh) = match axis {
                Axis::X => (w - k as usize, h),
                Axis::Y => (w, h - k as usize),
            };
            let mut weights = vec![0.0; vw * vh];
            for y in 0..vh {
                for x in 0..vw {
                    let g = match (axis, k) {
                        (Axis::X, 1) => img[y * w + x + 1] - img[y * w + x],
                        (Axis::X, _) => 0.5 * (img[y * w + x + 2] - img[y * w + x]),
                        (Axis::Y, 1) => img[(y + 1) * w + x] - img[y * w + x],
                        (Axis::Y, _) => 0.5 * (img[(y + 2) * w + x] - img[y * w + x]),
                    };
                    weights[y * vw + x] = (-lambda * g * g).exp();
                }
            }
            let wmap = tape.leaf(Shape::plane(vh, vw), weights);
            let mut axis_term: Option<Var> = None;
            for channel in [flow.dx, flow.dy] {
                let d = tape.diff(channel, axis, k);
                let f = tape.sqrt_eps(d, cfg.epsilon);
                let weighted = tape.mul(wmap, f);
                let m = tape.mean(weighted);
                axis_term = Some(match axis_term {
                    Some(t) => tape.add(t, m),
                    None => m,
                });
            }
            // average the two channels so a constant field costs eps per term
            let term = tape.scale(axis_term.expect("two channels"), 0.5);
            total = Some(match total {
                Some(t) => tape.add(t, term),
                None => term,
            });
        }
    }
    total.expect("four terms")
}

/// Off-graph L1 for reporting: same arithmetic on plain fields.
pub fn l1_multiscale(preds: &[FlowField; 3], gt: &FlowField) -> Result<f64> {
    let gts = [
        scale_flow_down(gt, 4)?,
        scale_flow_down(gt, 2)?,
        gt.clone(),
    ];
    let mut total = 0.0;
    for (pred, target) in preds.iter().zip(&gts) {
        let n = pred.dx().len() as f64;
        let mut sum = 0.0;
        for i in 0..pred.dx().len() {
            sum += (pred.dx()[i] - target.dx()[i]).abs() + (pred.dy()[i] - target.dy()[i]).abs();
        }
        total += sum / n;
    }
    Ok(total)
}

/// Off-graph smoothness for reporting and tests.
pub fn smoothness(flow: &FlowField, image: &Image, cfg: &LossConfig) -> Result<f64> {
    let mut graph = fake_graph(flow, image)?;
    let v = smoothness_on(&mut graph, cfg);
    Ok(graph.tape.value(v)[0])
}

/// Wraps plain values in a minimal graph so the on-tape builders are the
/// single source of the formulas.
fn fake_graph(flow: &FlowField, image: &Image) -> Result<ForwardGraph> {
    let (w, h) = (image.width(), image.height());
    if flow.width() != w || flow.height() != h {
        return Err(crate::error::Error::shape(
            "smoothness",
            format!("{}x{}", w, h),
            format!("{}x{}", flow.width(), flow.height()),
        ));
    }
    let mut tape = Tape::new();
    let dx = tape.leaf(Shape::plane(h, w), flow.dx().to_vec());
    let dy = tape.leaf(Shape::plane(h, w), flow.dy().to_vec());
    let fv = FlowVars { dx, dy };
    Ok(ForwardGraph {
        tape,
        param_vars: Vec::new(),
        scale_flows: [fv, fv, fv],
        stiffness: [dx, dx, dx],
        input_norm: image.data().iter().map(|&v| v as f64 / 255.0).collect(),
        width: w,
        height: h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_forward, ModelParams, NetConfig};

    #[test]
    fn smoothness_closed_form_constant_inputs() {
        // constant flow and constant image: every term is f(0) = eps,
        // two orders x two axes -> 4 eps
        let cfg = LossConfig::default();
        let mut flow = FlowField::zeros(12, 10);
        for i in 0..120 {
            flow.dx_mut()[i] = 3.0;
            flow.dy_mut()[i] = -1.5;
        }
        let img = Image::filled(12, 10, 80.0);
        let v = smoothness(&flow, &img, &cfg).unwrap();
        assert!((v - 4.0 * cfg.epsilon).abs() < 1e-12, "{v}");
    }

    #[test]
    fn strong_edges_suppress_the_penalty() {
        // a hard vertical intensity edge: the x-term weight collapses there
        let mut img = Image::filled(8, 8, 0.0);
        for y in 0..8 {
            for x in 4..8 {
                img.set(x, y, 255.0);
            }
        }
        let mut flow = FlowField::zeros(8, 8);
        for y in 0..8 {
            for x in 4..8 {
                flow.set(x, y, 0.0, 10.0); // flow jump aligned with the edge
            }
        }
        let cfg = LossConfig::default();
        let with_edge = smoothness(&flow, &img, &cfg).unwrap();
        let flat = Image::filled(8, 8, 0.0);
        let without_edge = smoothness(&flow, &flat, &cfg).unwrap();
        assert!(
            with_edge < 0.2 * without_edge,
            "{with_edge} vs {without_edge}"
        );
    }

    #[test]
    fn high_frequency_component_increases_smoothness() {
        let img = Image::filled(16, 16, 50.0);
        let cfg = LossConfig::default();
        let mut base = FlowField::zeros(16, 16);
        for y in 0..16 {
            for x in 0..16 {
                base.set(x, y, 0.0, (x as f64 * 0.8).sin());
            }
        }
        let mut doubled = base.clone();
        for v in doubled.dy_mut() {
            *v *= 2.0;
        }
        let a = smoothness(&base, &img, &cfg).unwrap();
        let b = smoothness(&doubled, &img, &cfg).unwrap();
        assert!(b > a, "{b} vs {a}");
    }

    #[test]
    fn l1_zero_when_predictions_match_rescaled_gt() {
        let gt = crate::phantom::make_axial_ramp_field(16, 16, -6.0);
        let preds = [
            scale_flow_down(&gt, 4).unwrap(),
            scale_flow_down(&gt, 2).unwrap(),
            gt.clone(),
        ];
        let v = l1_multiscale(&preds, &gt).unwrap();
        assert!(v.abs() < 1e-12, "{v}");
    }

    #[test]
    fn l1_constant_offset_at_one_scale() {
        let gt = FlowField::zeros(16, 16);
        let mut mid = FlowField::zeros(8, 8);
        for v in mid.dx_mut() {
            *v = 1.0;
        }
        let preds = [FlowField::zeros(4, 4), mid, FlowField::zeros(16, 16)];
        let v = l1_multiscale(&preds, &gt).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn total_loss_lambda2_zero_reduces_to_l1() {
        let params = ModelParams::init(NetConfig::default(), 3);
        let img = {
            let data = crate::gradcheck::random_buffer(256, 5)
                .into_iter()
                .map(|v| ((v + 1.0) * 127.5) as f32)
                .collect();
            Image::from_vec(16, 16, data).unwrap()
        };
        let gt = crate::phantom::make_axial_ramp_field(16, 16, -4.0);
        let cfg = LossConfig {
            lambda2: 0.0,
            ..LossConfig::default()
        };
        let mut graph = build_forward(&img, 2.0, 0.3, &params).unwrap();
        let (_, values) = total_loss_on(&mut graph, &gt, &cfg).unwrap();
        assert!((values.total - values.l1).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let params = ModelParams::init(NetConfig::default(), 13);
        let img = {
            let data = crate::gradcheck::random_buffer(256, 15)
                .into_iter()
                .map(|v| ((v + 1.0) * 127.5) as f32)
                .collect();
            Image::from_vec(16, 16, data).unwrap()
        };
        let gt = crate::phantom::make_elastic_field(16, 16, 2.0, 3.0, 17).unwrap();
        let cfg = LossConfig::default();
        for name in ["dfm1.ky", "ushape.out.w", "update3.c2"] {
            let idx = params.index_of(name);
            let eval = |p: &ModelParams| -> (f64, f64) {
                let mut graph = build_forward(&img, 2.5, 0.4, p).unwrap();
                let (total, values) = total_loss_on(&mut graph, &gt, &cfg).unwrap();
                let grads = graph.tape.backward(total);
                let g = grads
                    .get(graph.param_vars[idx])
                    .map(|v| v[0])
                    .unwrap_or(0.0);
                (values.total, g)
            };
            let (_, analytic) = eval(&params);
            let h = crate::gradcheck::FD_STEP;
            let mut plus = params.clone();
            plus.tensors[idx].data[0] += h;
            let mut minus = params.clone();
            minus.tensors[idx].data[0] -= h;
            let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            assert!(
                crate::gradcheck::fd_agree(analytic, numeric),
                "{name}: analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn loss_invariant_under_joint_horizontal_flip()  {
        let spec = crate::phantom::default_phantom_spec(32, 32, 3)
            .scaled_to_column_compliance(1.5)
            .unwrap();
        let r = crate::phantom::render_phantom(&spec).unwrap();
        let (deformed, gt) = crate::phantom::simulate_compression(&spec, &r.image, 4.0).unwrap();
        let pred = crate::phantom::make_elastic_field(32, 32, 2.0, 4.0, 9).unwrap();
        let cfg = LossConfig::default();
        let plain = smoothness(&pred, &deformed, &cfg).unwrap()
            + l1_multiscale(
                &[
                    scale_flow_down(&pred, 4).unwrap(),
                    scale_flow_down(&pred, 2).unwrap(),
                    pred.clone(),
                ],
                &gt,
            )
            .unwrap();
        let (fd, fp) = crate::phantom::augment(&deformed, &pred, 32, true, 0).unwrap();
        let (_, fg) = crate::phantom::augment(&deformed, &gt, 32, true, 0).unwrap();
        let flipped = smoothness(&fp, &fd, &cfg).unwrap()
            + l1_multiscale(
                &[
                    scale_flow_down(&fp, 4).unwrap(),
                    scale_flow_down(&fp, 2).unwrap(),
                    fp.clone(),
                ],
                &fg,
            )
            .unwrap();
        assert!((plain - flipped).abs() < 1e-9, "{plain} vs {flipped}");
    }
}
