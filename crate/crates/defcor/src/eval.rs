//! Quantitative evaluation: mask-block Dice, target localization accuracy
//! along annotated tissue interfaces, dense endpoint-error statistics, NCC,
//! stiffness-map histogram consistency, and the non-learned baselines.
//!
//! Annotations live on the uncompressed geometry; their deformed and
//! corrected counterparts are obtained by transporting them through the
//! known deformation and the predicted field rather than re-annotating, so
//! the metrics carry no annotation noise.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::calib::zscore;
use crate::dataset::{load_split, DatasetManifest, LoadedSample, Split};
use crate::error::{Error, Result};
use crate::flow::{epe, flow_to_color, invert_flow, warp, FlowField};
use crate::image::{ncc, Image};
use crate::net::{forward, ModelParams, StiffnessMap};
use crate::phantom::make_axial_ramp_field;

// ---------------------------------------------------------------------------
// Dice on mask blocks
// ---------------------------------------------------------------------------

const MASK_THRESHOLD: f32 = 127.5;

/// Dice coefficient in [0, 100]: `100 * 2|G n S| / (|G| + |S|)`.
/// Masks are images with foreground > 127.5; empty masks are rejected.
pub fn dice(gt_mask: &Image, other_mask: &Image) -> Result<f64> {
    if gt_mask.width() != other_mask.width() || gt_mask.height() != other_mask.height() {
        return Err(Error::shape(
            "dice",
            format!("{}x{}", gt_mask.width(), gt_mask.height()),
            format!("{}x{}", other_mask.width(), other_mask.height()),
        ));
    }
    let mut g = 0usize;
    let mut s = 0usize;
    let mut both = 0usize;
    for (&a, &b) in gt_mask.data().iter().zip(other_mask.data()) {
        let ia = a > MASK_THRESHOLD;
        let ib = b > MASK_THRESHOLD;
        g += ia as usize;
        s += ib as usize;
        both += (ia && ib) as usize;
    }
    if g == 0 || s == 0 {
        return Err(Error::InvalidInput("empty mask in dice".into()));
    }
    Ok(100.0 * 2.0 * both as f64 / (g + s) as f64)
}

/// Warps a binary mask by a field and re-thresholds at 0.5.
pub fn warp_mask(mask: &Image, flow: &FlowField) -> Result<Image> {
    let mut out = warp(mask, flow)?;
    for v in out.data_mut() {
        *v = if *v > MASK_THRESHOLD { 255.0 } else { 0.0 };
    }
    Ok(out)
}

/// Where the annotation sits on the deformed image: the ground-truth mask
/// pushed through the inverse of the correction field (the same map that
/// produced the deformed image).
pub fn deformed_mask(gt_mask: &Image, gt_flow: &FlowField) -> Result<Image> {
    let inverse = invert_flow(gt_flow, 20, 0.05);
    warp_mask(gt_mask, &inverse)
}

// ---------------------------------------------------------------------------
// Target localization accuracy
// ---------------------------------------------------------------------------

/// Horizontal sampling stride along each interface, px.
pub const TLA_STRIDE_PX: usize = 5;

#[derive(Clone, Copy, Debug, Default)]
pub struct TlaStats {
    pub ha_mean: f64,
    pub ha_sd: f64,
    pub va_mean: f64,
    pub va_sd: f64,
    pub n: usize,
}

/// Target localization accuracy between corresponding polylines.
///
/// Every 5th point of each ground-truth interface is a measurement point;
/// its coordinates from the top-left origin are compared with the
/// corresponding point of the other set, per axis, as
/// `max(0, 1 - |L_i - L_gt| / L_gt)`. Sample points whose ground-truth
/// coordinate is below one pixel are skipped (the relative error has no
/// meaning there). Returns per-interface stats and the pooled result.
pub fn tla(
    gt: &[Vec<(f64, f64)>],
    other: &[Vec<(f64, f64)>],
) -> Result<(Vec<TlaStats>, TlaStats)> {
    if gt.len() != other.len() {
        return Err(Error::shape("tla interface count", gt.len(), other.len()));
    }
    let mut per_interface = Vec::with_capacity(gt.len());
    let mut pooled_ha = Vec::new();
    let mut pooled_va = Vec::new();
    for (gl, ol) in gt.iter().zip(other) {
        if gl.len() != ol.len() {
            return Err(Error::shape("tla polyline points", gl.len(), ol.len()));
        }
        let mut ha = Vec::new();
        let mut va = Vec::new();
        for i in (0..gl.len()).step_by(TLA_STRIDE_PX) {
            let (gx, gy) = gl[i];
            let (ox, oy) = ol[i];
            if gx >= 1.0 {
                ha.push((1.0 - (ox - gx).abs() / gx).max(0.0));
            }
            if gy >= 1.0 {
                va.push((1.0 - (oy - gy).abs() / gy).max(0.0));
            }
        }
        pooled_ha.extend_from_slice(&ha);
        pooled_va.extend_from_slice(&va);
        per_interface.push(stats_pair(&ha, &va));
    }
    if pooled_ha.is_empty() && pooled_va.is_empty() {
        return Err(Error::InvalidInput("no usable TLA sample points".into()));
    }
    Ok((per_interface, stats_pair(&pooled_ha, &pooled_va)))
}

fn stats_pair(ha: &[f64], va: &[f64]) -> TlaStats {
    let (hm, hs) = mean_sd(ha);
    let (vm, vs) = mean_sd(va);
    TlaStats {
        ha_mean: hm,
        ha_sd: hs,
        va_mean: vm,
        va_sd: vs,
        n: ha.len().max(va.len()),
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Moves annotation points into the deformed image: a material point at `p`
/// appears at `p + gt_flow(p)`.
pub fn transport_to_deformed(points: &[(f64, f64)], gt_flow: &FlowField) -> Vec<(f64, f64)> {
    points
        .iter()
        .map(|&(x, y)| {
            let (dx, dy) = sample_flow(gt_flow, x, y);
            (x + dx, y + dy)
        })
        .collect()
}

/// Moves deformed-image points into the corrected image: solves
/// `P + pred(P) = q` by fixed point, so a perfect prediction returns the
/// original annotation.
pub fn transport_to_corrected(points: &[(f64, f64)], pred: &FlowField) -> Vec<(f64, f64)> {
    points
        .iter()
        .map(|&(qx, qy)| {
            let (mut px, mut py) = (qx, qy);
            for _ in 0..20 {
                let (dx, dy) = sample_flow(pred, px, py);
                let (nx, ny) = (qx - dx, qy - dy);
                if (nx - px).abs().max((ny - py).abs()) < 0.01 {
                    px = nx;
                    py = ny;
                    break;
                }
                px = nx;
                py = ny;
            }
            (px, py)
        })
        .collect()
}

fn sample_flow(flow: &FlowField, x: f64, y: f64) -> (f64, f64) {
    let (w, h) = (flow.width(), flow.height());
    let cx = x.clamp(0.0, (w - 1) as f64);
    let cy = y.clamp(0.0, (h - 1) as f64);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = cx - x0 as f64;
    let fy = cy - y0 as f64;
    let lerp = |v00: f64, v01: f64, v10: f64, v11: f64| {
        (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
    };
    (
        lerp(
            flow.dx()[y0 * w + x0],
            flow.dx()[y0 * w + x1],
            flow.dx()[y1 * w + x0],
            flow.dx()[y1 * w + x1],
        ),
        lerp(
            flow.dy()[y0 * w + x0],
            flow.dy()[y0 * w + x1],
            flow.dy()[y1 * w + x0],
            flow.dy()[y1 * w + x1],
        ),
    )
}

// ---------------------------------------------------------------------------
// Stiffness-map histogram consistency
// ---------------------------------------------------------------------------

pub const HISTOGRAM_BINS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianFit {
    pub mean: f64,
    pub sd: f64,
}

/// Histogram over the map's own value range (inspection artifact) plus a
/// Gaussian fitted from the sample moments of the pixel values.
pub fn fit_map_gaussian(map: &StiffnessMap) -> Result<(Vec<usize>, GaussianFit)> {
    let (mean, sd) = mean_sd(&map.data);
    if sd == 0.0 {
        return Err(Error::DegenerateFit(
            "stiffness map has zero variance".into(),
        ));
    }
    let min = map.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = map.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scale = HISTOGRAM_BINS as f64 / (max - min);
    let mut hist = vec![0usize; HISTOGRAM_BINS];
    for &v in &map.data {
        let b = (((v - min) * scale) as usize).min(HISTOGRAM_BINS - 1);
        hist[b] += 1;
    }
    Ok((hist, GaussianFit { mean, sd }))
}

/// Overlap area of two fitted normal densities, via their analytic crossing
/// points and the normal CDF.
pub fn gaussian_overlap(a: &GaussianFit, b: &GaussianFit) -> f64 {
    if a.mean == b.mean && a.sd == b.sd {
        return 1.0;
    }
    if (a.sd - b.sd).abs() < 1e-15 * a.sd.max(b.sd) {
        // equal spread: single crossing at the midpoint
        return (2.0 * normal_cdf(-(a.mean - b.mean).abs() / (2.0 * a.sd))).clamp(0.0, 1.0);
    }
    // log f_a(x) = log f_b(x) is quadratic in x
    let qa = 0.5 / (a.sd * a.sd) - 0.5 / (b.sd * b.sd);
    let qb = b.mean / (b.sd * b.sd) - a.mean / (a.sd * a.sd);
    let qc = a.mean * a.mean / (2.0 * a.sd * a.sd) - b.mean * b.mean / (2.0 * b.sd * b.sd)
        + (a.sd / b.sd).ln();
    // with distinct sds qa != 0, so two real crossings always exist
    let disc = (qb * qb - 4.0 * qa * qc).max(0.0).sqrt();
    let mut x1 = (-qb - disc) / (2.0 * qa);
    let mut x2 = (-qb + disc) / (2.0 * qa);
    if x1 > x2 {
        std::mem::swap(&mut x1, &mut x2);
    }
    let density = |f: &GaussianFit, x: f64| {
        let z = (x - f.mean) / f.sd;
        (-0.5 * z * z).exp() / f.sd
    };
    let cdf = |f: &GaussianFit, x: f64| normal_cdf((x - f.mean) / f.sd);
    let mut area = 0.0;
    let probes = [x1 - 1.0, 0.5 * (x1 + x2), x2 + 1.0];
    let bounds = [(f64::NEG_INFINITY, x1), (x1, x2), (x2, f64::INFINITY)];
    for (probe, (lo, hi)) in probes.iter().zip(bounds) {
        let smaller = if density(a, *probe) <= density(b, *probe) {
            a
        } else {
            b
        };
        let lo_cdf = if lo.is_finite() { cdf(smaller, lo) } else { 0.0 };
        let hi_cdf = if hi.is_finite() { cdf(smaller, hi) } else { 1.0 };
        area += hi_cdf - lo_cdf;
    }
    area.clamp(0.0, 1.0)
}

/// Pairwise difference scores `1 - A_ov` for consecutive maps.
pub fn histogram_consistency(maps: &[StiffnessMap]) -> Result<Vec<f64>> {
    if maps.len() < 2 {
        return Err(Error::InvalidInput(
            "need at least two maps for consistency".into(),
        ));
    }
    let fits: Vec<GaussianFit> = maps
        .iter()
        .map(|m| fit_map_gaussian(m).map(|(_, f)| f))
        .collect::<Result<_>>()?;
    Ok(fits
        .windows(2)
        .map(|pair| 1.0 - gaussian_overlap(&pair[0], &pair[1]))
        .collect())
}

/// Standard normal CDF via the Abramowitz-Stegun erf approximation
/// (absolute error < 1.5e-7).
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

/// Ramp correction assuming compression grows linearly with depth:
/// `surface_disp_px` is the (signed) axial displacement the linear model
/// extrapolates for the deepest row; for a compressed image it is negative.
pub fn linear_scaling_field(width: usize, height: usize, surface_disp_px: f64) -> FlowField {
    make_axial_ramp_field(width, height, surface_disp_px)
}

pub fn linear_scaling_baseline(image: &Image, surface_disp_px: f64) -> Result<Image> {
    let field = linear_scaling_field(image.width(), image.height(), surface_disp_px);
    warp(image, &field)
}

/// The linear model's displacement estimate: a least-squares ramp fitted
/// through the origin to the row-mean axial displacement of the reference
/// field's shallow half, extrapolated to the deepest row. Exact on a true
/// ramp; systematically over-corrects depth when compression concentrates
/// superficially.
pub fn surface_disp_from_top_rows(gt_flow: &FlowField) -> f64 {
    let (w, h) = (gt_flow.width(), gt_flow.height());
    let band = (h / 2).max(2);
    let mut num = 0.0;
    let mut den = 0.0;
    for y in 1..=band.min(h - 1) {
        let row_mean: f64 =
            gt_flow.dy()[y * w..(y + 1) * w].iter().sum::<f64>() / w as f64;
        num += row_mean * y as f64;
        den += (y * y) as f64;
    }
    let slope = if den > 0.0 { num / den } else { 0.0 };
    slope * (h - 1) as f64
}

// ---------------------------------------------------------------------------
// Full evaluation runs
// ---------------------------------------------------------------------------

/// What produces the predicted correction field.
pub enum EvalModel<'a> {
    Trained(&'a ModelParams),
    /// Ramp field extrapolated from the reference field's top rows.
    LinearScaling,
    /// Zero field: corrected metrics equal deformed metrics.
    Identity,
    /// The ground-truth field itself: the upper bound.
    Oracle,
}

impl EvalModel<'_> {
    fn name(&self) -> &'static str {
        match self {
            EvalModel::Trained(_) => "defcor",
            EvalModel::LinearScaling => "linear_scaling",
            EvalModel::Identity => "identity",
            EvalModel::Oracle => "oracle",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SampleEval {
    pub id: String,
    pub force_bin: u32,
    pub epe_mean: f64,
    pub per10: f64,
    pub per15: f64,
    pub per20: f64,
    pub ncc_deformed: f64,
    pub ncc_corrected: f64,
    pub dice_deformed: Option<f64>,
    pub dice_corrected: Option<f64>,
    pub tla_deformed: Option<TlaStats>,
    pub tla_corrected: Option<TlaStats>,
}

#[derive(Clone, Debug)]
pub struct MetricRow {
    pub force_bin: String,
    pub metric: String,
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

pub struct EvalReport {
    pub model: &'static str,
    pub rows: Vec<MetricRow>,
    pub samples: Vec<SampleEval>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    /// Pooled mean of a metric over all force bins.
    pub fn pooled(&self, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.force_bin == "all" && r.metric == metric)
            .map(|r| r.mean)
    }

    /// Mean of a metric in one force bin.
    pub fn at_bin(&self, bin: u32, metric: &str) -> Option<f64> {
        let key = bin.to_string();
        self.rows
            .iter()
            .find(|r| r.force_bin == key && r.metric == metric)
            .map(|r| r.mean)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("force_bin,metric,mean,sd,n\n");
        for r in &self.rows {
            writeln!(&mut out, "{},{},{},{},{}", r.force_bin, r.metric, r.mean, r.sd, r.n)
                .expect("in-memory write");
        }
        fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Evaluates one split of a dataset against a model or baseline. When
/// `out_dir` is given, per-sample flow-error color maps are written next to
/// the report.
pub fn evaluate_run(
    data_dir: &Path,
    manifest: &DatasetManifest,
    split: Split,
    model: &EvalModel,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    let samples = load_split(data_dir, manifest, split)?;
    if samples.is_empty() {
        return Err(Error::InvalidInput("empty evaluation split".into()));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    let evals: Vec<Result<(SampleEval, Vec<String>)>> = samples
        .par_iter()
        .map(|s| evaluate_sample(s, model, out_dir))
        .collect();
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut warnings = Vec::new();
    for e in evals {
        let (eval, warn) = e?;
        per_sample.push(eval);
        warnings.extend(warn);
    }

    let mut bins: Vec<u32> = per_sample.iter().map(|e| e.force_bin).collect();
    bins.sort_unstable();
    bins.dedup();

    let mut rows = Vec::new();
    let mut add_metric = |name: &str, select: &dyn Fn(&SampleEval) -> Option<f64>| {
        for bin in bins.iter().map(|b| Some(*b)).chain([None]) {
            let values: Vec<f64> = per_sample
                .iter()
                .filter(|e| bin.is_none_or(|b| e.force_bin == b))
                .filter_map(select)
                .collect();
            if values.is_empty() {
                continue;
            }
            let (mean, sd) = mean_sd(&values);
            rows.push(MetricRow {
                force_bin: bin.map_or("all".into(), |b| b.to_string()),
                metric: name.to_string(),
                mean,
                sd,
                n: values.len(),
            });
        }
    };
    add_metric("epe_mean", &|e| Some(e.epe_mean));
    add_metric("per10", &|e| Some(e.per10));
    add_metric("per15", &|e| Some(e.per15));
    add_metric("per20", &|e| Some(e.per20));
    add_metric("ncc_deformed", &|e| Some(e.ncc_deformed));
    add_metric("ncc_corrected", &|e| Some(e.ncc_corrected));
    add_metric("dice_deformed", &|e| e.dice_deformed);
    add_metric("dice_corrected", &|e| e.dice_corrected);
    add_metric("ha_deformed", &|e| e.tla_deformed.map(|t| t.ha_mean));
    add_metric("ha_corrected", &|e| e.tla_corrected.map(|t| t.ha_mean));
    add_metric("va_deformed", &|e| e.tla_deformed.map(|t| t.va_mean));
    add_metric("va_corrected", &|e| e.tla_corrected.map(|t| t.va_mean));

    let report = EvalReport {
        model: model.name(),
        rows,
        samples: per_sample,
        warnings,
    };
    if let Some(dir) = out_dir {
        report.write_csv(&dir.join("report.csv"))?;
    }
    Ok(report)
}

fn evaluate_sample(
    sample: &LoadedSample,
    model: &EvalModel,
    out_dir: Option<&Path>,
) -> Result<(SampleEval, Vec<String>)> {
    let mut warnings = Vec::new();
    let record = &sample.record;
    let pred = match model {
        EvalModel::Trained(params) => {
            let pop = params.population.as_ref().ok_or_else(|| {
                Error::Checkpoint("model has no stiffness population".into())
            })?;
            let k_g_n = zscore(record.global_stiffness_n_per_mm, pop)?;
            forward(&sample.deformed, record.force_n, k_g_n, params)?.flow
        }
        EvalModel::LinearScaling => {
            let disp = surface_disp_from_top_rows(&sample.gt);
            linear_scaling_field(sample.deformed.width(), sample.deformed.height(), disp)
        }
        EvalModel::Identity => {
            FlowField::zeros(sample.deformed.width(), sample.deformed.height())
        }
        EvalModel::Oracle => sample.gt.clone(),
    };

    let corrected = warp(&sample.deformed, &pred)?;
    let (_, stats) = epe(&pred, &sample.gt)?;
    let ncc_deformed = ncc(&sample.deformed, &sample.original)?;
    let ncc_corrected = ncc(&corrected, &sample.original)?;

    let (dice_deformed, dice_corrected) = match &sample.mask {
        Some(mask) => {
            // a transported annotation pushed entirely out of view is a
            // total localization failure, not an input error
            let guarded = |other: &Image| -> Result<f64> {
                if other.data().iter().all(|&v| v <= MASK_THRESHOLD) {
                    Ok(0.0)
                } else {
                    dice(mask, other)
                }
            };
            let m_def = deformed_mask(mask, &sample.gt)?;
            let m_corr = warp_mask(&m_def, &pred)?;
            (Some(guarded(&m_def)?), Some(guarded(&m_corr)?))
        }
        None => {
            warnings.push(format!("{}: no mask, skipping Dice", record.id));
            (None, None)
        }
    };

    let (tla_deformed, tla_corrected) = match &sample.interfaces {
        Some(interfaces) => {
            let deformed_pts: Vec<Vec<(f64, f64)>> = interfaces
                .iter()
                .map(|line| transport_to_deformed(line, &sample.gt))
                .collect();
            let corrected_pts: Vec<Vec<(f64, f64)>> = deformed_pts
                .iter()
                .map(|line| transport_to_corrected(line, &pred))
                .collect();
            let (_, def_stats) = tla(interfaces, &deformed_pts)?;
            let (_, corr_stats) = tla(interfaces, &corrected_pts)?;
            (Some(def_stats), Some(corr_stats))
        }
        None => {
            warnings.push(format!("{}: no interfaces, skipping TLA", record.id));
            (None, None)
        }
    };

    if let Some(dir) = out_dir {
        let mut err_field = pred.clone();
        for i in 0..err_field.dx().len() {
            err_field.dx_mut()[i] -= sample.gt.dx()[i];
            err_field.dy_mut()[i] -= sample.gt.dy()[i];
        }
        let rgb = flow_to_color(&err_field, Some(15.0));
        rgb.write_ppm(&dir.join(format!("{}_flow_error.ppm", record.id)))?;
    }

    Ok((
        SampleEval {
            id: record.id.clone(),
            force_bin: record.force_n.round() as u32,
            epe_mean: stats.mean,
            per10: stats.per10,
            per15: stats.per15,
            per20: stats.per20,
            ncc_deformed,
            ncc_corrected,
            dice_deformed,
            dice_corrected,
            tla_deformed,
            tla_corrected,
        },
        warnings,
    ))
}
