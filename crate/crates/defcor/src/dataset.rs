//! Dataset synthesis and manifest handling.
//!
//! One "subject" is a phantom plus a palpation trace; each subject is
//! compressed at several forces, producing one record per (subject, force).
//! Records carry relative paths, the contact force and the fitted global
//! stiffness; splits are disjoint at the record level with the ~70/10/20
//! proportions.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::{fit_global_stiffness, synth_palpation_trace, write_trace_csv};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::image::Image;
use crate::phantom::{default_phantom_spec, render_phantom, simulate_compression};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub subject: String,
    pub split: Split,
    /// Deformed image: the corrector's input.
    pub image_path: String,
    /// Uncompressed reference image.
    pub original_path: String,
    pub flow_gt_path: String,
    pub mask_path: Option<String>,
    pub interfaces_path: Option<String>,
    pub palpation_path: Option<String>,
    pub force_n: f64,
    pub global_stiffness_n_per_mm: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub spacing_mm_per_px: f64,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read(dir: &Path) -> Result<DatasetManifest> {
        let path = dir.join("manifest.json");
        let text =
            fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

fn default_width() -> usize {
    96
}
fn default_height() -> usize {
    128
}
fn default_subjects() -> usize {
    12
}
fn default_forces() -> Vec<f64> {
    vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
}
fn default_seed() -> u64 {
    7
}
fn default_train_fraction() -> f64 {
    0.7
}
fn default_val_fraction() -> f64 {
    0.1
}
fn default_palpation_noise() -> f64 {
    0.35
}
fn default_palpation_samples() -> usize {
    120
}

/// Knobs of the synthetic acquisition. The defaults give 72 records
/// (12 subjects x 6 forces) at 96x128 with desk-scale stiffness values.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub subjects: usize,
    pub forces_n: Vec<f64>,
    pub seed: u64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub palpation_noise_n: f64,
    pub palpation_samples: usize,
    /// Forearm-like stiffness group (mean, sd), N/mm.
    pub forearm_stiffness: (f64, f64),
    /// Upper-arm-like stiffness group (mean, sd), N/mm.
    pub upperarm_stiffness: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: default_width(),
            height: default_height(),
            subjects: default_subjects(),
            forces_n: default_forces(),
            seed: default_seed(),
            train_fraction: default_train_fraction(),
            val_fraction: default_val_fraction(),
            palpation_noise_n: default_palpation_noise(),
            palpation_samples: default_palpation_samples(),
            forearm_stiffness: (1.80, 0.48),
            upperarm_stiffness: (0.78, 0.03),
        }
    }
}

impl SynthConfig {
    /// Physical sampling: the image height spans the 45 mm imaging depth.
    pub fn spacing_mm_per_px(&self) -> f64 {
        45.0 / self.height as f64
    }
}

/// Generates the dataset under `out_dir` (subdirectories `samples/` and
/// `palpation/`) and writes `manifest.json`. Deterministic per seed; files
/// are byte-identical across runs.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    if cfg.subjects == 0 || cfg.forces_n.is_empty() {
        return Err(Error::InvalidInput("empty dataset configuration".into()));
    }
    let samples_dir = out_dir.join("samples");
    let palpation_dir = out_dir.join("palpation");
    fs::create_dir_all(&samples_dir)
        .map_err(|e| Error::io(samples_dir.display().to_string(), e))?;
    fs::create_dir_all(&palpation_dir)
        .map_err(|e| Error::io(palpation_dir.display().to_string(), e))?;

    let spacing = cfg.spacing_mm_per_px();
    let subject_ids: Vec<usize> = (0..cfg.subjects).collect();
    let per_subject: Vec<Vec<SampleRecord>> = subject_ids
        .par_iter()
        .map(|&s| generate_subject(cfg, out_dir, s, spacing))
        .collect::<Result<Vec<_>>>()?;

    let mut records: Vec<SampleRecord> = per_subject.into_iter().flatten().collect();
    records.sort_by(|a, b| a.id.cmp(&b.id));
    assign_splits(&mut records, cfg);

    let manifest = DatasetManifest {
        format_version: 1,
        spacing_mm_per_px: spacing,
        records,
    };
    manifest.write(out_dir)?;
    Ok(manifest)
}

fn generate_subject(
    cfg: &SynthConfig,
    out_dir: &Path,
    subject: usize,
    spacing: f64,
) -> Result<Vec<SampleRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, subject as u64, 1));

    // alternate forearm-like and upper-arm-like subjects
    let (mean, sd) = if subject % 2 == 0 {
        cfg.forearm_stiffness
    } else {
        cfg.upperarm_stiffness
    };
    let gauss: f64 = (0..12).map(|_| rng.random::<f64>()).sum::<f64>() - 6.0;
    let k_true = (mean + sd * gauss).max(0.3);

    // palpation presses to ~15 N; the fitted slope is what gets recorded
    let trace = synth_palpation_trace(
        k_true,
        15.0 / k_true,
        cfg.palpation_samples,
        cfg.palpation_noise_n,
        mix(cfg.seed, subject as u64, 2),
    );
    let fit = fit_global_stiffness(&trace)?;
    let palpation_rel = format!("palpation/subject{subject:02}.csv");
    write_trace_csv(&trace, &out_dir.join(&palpation_rel))?;

    let spec = default_phantom_spec(cfg.width, cfg.height, mix(cfg.seed, subject as u64, 3))
        .scaled_to_column_compliance(1.0 / (k_true * spacing))?;
    let rendered = render_phantom(&spec)?;

    let orig_rel = format!("samples/s{subject:02}_original.pgm");
    let mask_rel = format!("samples/s{subject:02}_mask.pgm");
    let ifc_rel = format!("samples/s{subject:02}_interfaces.csv");
    rendered.image.write_pgm(&out_dir.join(&orig_rel))?;
    rendered.mask.write_pgm(&out_dir.join(&mask_rel))?;
    write_interfaces_csv(&rendered.interfaces, &out_dir.join(&ifc_rel))?;

    let mut records = Vec::with_capacity(cfg.forces_n.len());
    for (fi, &force) in cfg.forces_n.iter().enumerate() {
        let (deformed, gt) = simulate_compression(&spec, &rendered.image, force)?;
        let img_rel = format!("samples/s{subject:02}_f{fi}.pgm");
        let flow_rel = format!("samples/s{subject:02}_f{fi}.dff");
        deformed.write_pgm(&out_dir.join(&img_rel))?;
        gt.write_dff(&out_dir.join(&flow_rel))?;
        records.push(SampleRecord {
            id: format!("s{subject:02}_f{fi}"),
            subject: format!("s{subject:02}"),
            split: Split::Train, // reassigned below
            image_path: img_rel,
            original_path: orig_rel.clone(),
            flow_gt_path: flow_rel,
            mask_path: Some(mask_rel.clone()),
            interfaces_path: Some(ifc_rel.clone()),
            palpation_path: Some(palpation_rel.clone()),
            force_n: force,
            global_stiffness_n_per_mm: fit.c2_slope,
        });
    }
    Ok(records)
}

/// Shuffles record indices and cuts ceil(train), ceil(val), rest; with the
/// default 72 records this reproduces the 51/8/13 set split.
fn assign_splits(records: &mut [SampleRecord], cfg: &SynthConfig) {
    let n = records.len();
    let n_train = (cfg.train_fraction * n as f64).ceil() as usize;
    let n_val = (cfg.val_fraction * n as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0xabcd, 4));
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    for (rank, &idx) in order.iter().enumerate() {
        records[idx].split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
}

/// An in-memory sample with everything evaluation needs.
pub struct LoadedSample {
    pub record: SampleRecord,
    pub deformed: Image,
    pub original: Image,
    pub gt: FlowField,
    pub mask: Option<Image>,
    pub interfaces: Option<Vec<Vec<(f64, f64)>>>,
}

pub fn load_sample(dir: &Path, record: &SampleRecord) -> Result<LoadedSample> {
    let deformed = Image::read_pgm(&dir.join(&record.image_path))?;
    let original = Image::read_pgm(&dir.join(&record.original_path))?;
    let gt = FlowField::read_dff(&dir.join(&record.flow_gt_path))?;
    if gt.width() != deformed.width() || gt.height() != deformed.height() {
        return Err(Error::shape(
            "sample flow dims",
            format!("{}x{}", deformed.width(), deformed.height()),
            format!("{}x{}", gt.width(), gt.height()),
        ));
    }
    let mask = record
        .mask_path
        .as_ref()
        .map(|p| Image::read_pgm(&dir.join(p)))
        .transpose()?;
    let interfaces = record
        .interfaces_path
        .as_ref()
        .map(|p| read_interfaces_csv(&dir.join(p)))
        .transpose()?;
    Ok(LoadedSample {
        record: record.clone(),
        deformed,
        original,
        gt,
        mask,
        interfaces,
    })
}

pub fn load_split(dir: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<LoadedSample>> {
    manifest
        .split(split)
        .map(|r| load_sample(dir, r))
        .collect()
}

/// Interface polylines as CSV rows `interface_id,x,y`.
pub fn write_interfaces_csv(interfaces: &[Vec<(f64, f64)>], path: &Path) -> Result<()> {
    let mut out = String::from("interface_id,x,y\n");
    for (id, line) in interfaces.iter().enumerate() {
        for &(x, y) in line {
            writeln!(&mut out, "{id},{x},{y}").expect("in-memory write");
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_interfaces_csv(path: &Path) -> Result<Vec<Vec<(f64, f64)>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines: Vec<Vec<(f64, f64)>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let bad = |msg: &str| Error::Format {
            path: path.display().to_string(),
            message: format!("line {}: {msg}", lineno + 1),
        };
        if fields.len() != 3 {
            return Err(bad("expected 3 columns"));
        }
        let id: usize = fields[0].trim().parse().map_err(|_| bad("bad id"))?;
        let x: f64 = fields[1].trim().parse().map_err(|_| bad("bad x"))?;
        let y: f64 = fields[2].trim().parse().map_err(|_| bad("bad y"))?;
        while lines.len() <= id {
            lines.push(Vec::new());
        }
        lines[id].push((x, y));
    }
    Ok(lines)
}

/// Derives independent random streams: splitmix-style hash of seed + labels.
pub fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(b.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Convenience: resolves a manifest path (`DIR` containing manifest.json).
pub fn dataset_dir(path: &Path) -> PathBuf {
    path.to_path_buf()
}
