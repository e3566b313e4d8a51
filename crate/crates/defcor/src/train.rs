//! Training loop: shuffled batches with flip/crop augmentation, Adam on the
//! mean batch gradient, periodic validation EPE, checkpointing with the
//! optimizer state, and an append-only metrics CSV.
//!
//! Determinism contract: sample order, augmentation draws and gradient
//! reduction depend only on (seed, global step), so a resumed run replays
//! the exact step sequence. Batch members may evaluate in parallel; their
//! gradients are reduced in member order.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamConfig, AdamState};
use crate::calib::{zscore, StiffnessPopulation};
use crate::checkpoint::{save_checkpoint, TrainingState};
use crate::dataset::{load_split, DatasetManifest, LoadedSample, Split};
use crate::error::{Error, Result};
use crate::flow::epe;
use crate::loss::{total_loss_on, LossConfig};
use crate::net::{build_forward, forward, ModelParams, NetConfig};
use crate::phantom::augment;

fn default_lr() -> f64 {
    1e-4
}
fn default_steps() -> u64 {
    1500
}
fn default_batch() -> usize {
    4
}
fn default_crop() -> usize {
    80
}
fn default_ckpt_interval() -> u64 {
    250
}
fn default_val_interval() -> u64 {
    50
}
fn default_train_seed() -> u64 {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Optimizer steps ("epochs" are read as steps at desk scale).
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Random-crop width; cropping never touches the height.
    pub crop_width: usize,
    pub checkpoint_interval: u64,
    pub val_interval: u64,
    /// Worker threads for batch members; 0 keeps the global default.
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            steps: default_steps(),
            batch_size: default_batch(),
            seed: default_train_seed(),
            crop_width: default_crop(),
            checkpoint_interval: default_ckpt_interval(),
            val_interval: default_val_interval(),
            jobs: 0,
        }
    }
}

pub struct TrainReport {
    pub steps_run: u64,
    pub final_train_loss: f64,
    pub best_val_epe: f64,
    pub final_val_epe: f64,
    pub best_checkpoint: PathBuf,
    pub latest_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
}

/// Runs (or resumes) training and writes checkpoints plus `metrics.csv`
/// under `out_dir`. `resume` carries params + optimizer state + next step.
pub fn train_loop(
    data_dir: &Path,
    manifest: &DatasetManifest,
    net_config: NetConfig,
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
    out_dir: &Path,
    resume: Option<(ModelParams, TrainingState)>,
) -> Result<TrainReport> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let train: Vec<LoadedSample> = load_split(data_dir, manifest, Split::Train)?;
    let val: Vec<LoadedSample> = load_split(data_dir, manifest, Split::Val)?;
    if train.is_empty() {
        return Err(Error::InvalidInput("empty training split".into()));
    }
    if tcfg.crop_width % 16 != 0 {
        return Err(Error::InvalidInput(format!(
            "crop width {} must be a multiple of 16",
            tcfg.crop_width
        )));
    }

    // population from the training records, persisted in every checkpoint
    let k_values: Vec<f64> = train
        .iter()
        .map(|s| s.record.global_stiffness_n_per_mm)
        .collect();
    let population = StiffnessPopulation::from_values(&k_values)?;

    let (mut params, mut adam, start_step) = match resume {
        Some((p, ts)) => (p, ts.adam, ts.step),
        None => {
            let mut p = ModelParams::init(net_config, tcfg.seed);
            p.population = Some(population);
            let a = AdamState::new(&p);
            (p, a, 0)
        }
    };
    let pop = params
        .population
        .ok_or_else(|| Error::Checkpoint("resumed model lacks a population".into()))?;
    let k_norm: Vec<f64> = train
        .iter()
        .map(|s| zscore(s.record.global_stiffness_n_per_mm, &pop))
        .collect::<Result<_>>()?;
    let val_norm: Vec<f64> = val
        .iter()
        .map(|s| zscore(s.record.global_stiffness_n_per_mm, &pop))
        .collect::<Result<_>>()?;

    let adam_cfg = AdamConfig::with_lr(tcfg.learning_rate);
    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = if start_step == 0 {
        String::from("step,train_loss,l1,smooth,val_epe\n")
    } else {
        fs::read_to_string(&metrics_path).unwrap_or_else(|_| {
            String::from("step,train_loss,l1,smooth,val_epe\n")
        })
    };

    let best_path = out_dir.join("model_best.ckpt");
    let latest_path = out_dir.join("model_latest.ckpt");
    let mut best_val = f64::INFINITY;
    let mut last_val = f64::NAN;
    let mut last_loss = f64::NAN;

    let pool = build_pool(tcfg.jobs)?;

    for step in start_step..tcfg.steps {
        let members: Vec<(usize, u64)> = (0..tcfg.batch_size)
            .map(|m| {
                let counter = step * tcfg.batch_size as u64 + m as u64;
                let idx = shuffled_index(tcfg.seed, counter, train.len());
                (idx, counter)
            })
            .collect();

        let results: Vec<Result<(crate::loss::LossValues, Vec<Vec<f64>>)>> = pool.install(|| {
            members
                .par_iter()
                .map(|&(idx, counter)|

                    member_pass(&train[idx], k_norm[idx], &params, tcfg, lcfg, counter))
                .collect()
        });

        // fixed-order reduction over batch members
        let mut grads: Vec<Vec<f64>> = params
            .tensors
            .iter()
            .map(|t| vec![0.0; t.data.len()])
            .collect();
        let mut loss_sum = 0.0;
        let mut l1_sum = 0.0;
        let mut sm_sum = 0.0;
        for r in results {
            let (values, member_grads) = r?;
            loss_sum += values.total;
            l1_sum += values.l1;
            sm_sum += values.smoothness;
            for (acc, g) in grads.iter_mut().zip(&member_grads) {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        let inv = 1.0 / tcfg.batch_size as f64;
        for g in &mut grads {
            for v in g.iter_mut() {
                *v *= inv;
            }
        }
        adam_step(&mut params, &grads, &mut adam, &adam_cfg)?;
        last_loss = loss_sum * inv;

        let next = step + 1;
        let is_val = next % tcfg.val_interval == 0 || next == tcfg.steps;
        let val_cell = if is_val && !val.is_empty() {
            let v = validation_epe(&val, &val_norm, &params)?;
            last_val = v;
            if v <= best_val {
                best_val = v;
                save_checkpoint(&best_path, &params, None)?;
            }
            format!("{v}")
        } else {
            String::new()
        };
        writeln!(
            &mut metrics,
            "{next},{},{},{},{val_cell}",
            loss_sum * inv,
            l1_sum * inv,
            sm_sum * inv
        )
        .expect("in-memory write");

        if next % tcfg.checkpoint_interval == 0 || next == tcfg.steps {
            let ts = TrainingState {
                adam: adam.clone(),
                step: next,
            };
            save_checkpoint(&latest_path, &params, Some(&ts))?;
            fs::write(&metrics_path, &metrics)
                .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
        }
    }

    // a run short enough to never hit a validation step still reports one
    if last_val.is_nan() && !val.is_empty() {
        last_val = validation_epe(&val, &val_norm, &params)?;
        if last_val <= best_val {
            best_val = last_val;
            save_checkpoint(&best_path, &params, None)?;
        }
    }
    if !best_path.exists() {
        save_checkpoint(&best_path, &params, None)?;
    }
    let ts = TrainingState {
        adam,
        step: tcfg.steps,
    };
    save_checkpoint(&latest_path, &params, Some(&ts))?;
    fs::write(&metrics_path, &metrics)
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;

    Ok(TrainReport {
        steps_run: tcfg.steps - start_step,
        final_train_loss: last_loss,
        best_val_epe: best_val,
        final_val_epe: last_val,
        best_checkpoint: best_path,
        latest_checkpoint: latest_path,
        metrics_path,
    })
}

/// Forward + loss + backward for one batch member.
fn member_pass(
    sample: &LoadedSample,
    k_g_n: f64,
    params: &ModelParams,
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
    counter: u64,
) -> Result<(crate::loss::LossValues, Vec<Vec<f64>>)> {
    let crop = tcfg.crop_width.min(sample.deformed.width());
    let mut rng = ChaCha8Rng::seed_from_u64(crate::dataset::mix(tcfg.seed, counter, 5));
    let flip = rng.random::<f64>() < 0.5;
    let crop_seed = crate::dataset::mix(tcfg.seed, counter, 6);
    let (img, gt) = augment(&sample.deformed, &sample.gt, crop, flip, crop_seed)?;

    let mut graph = build_forward(&img, sample.record.force_n, k_g_n, params)?;
    let (total, values) = total_loss_on(&mut graph, &gt, lcfg)?;
    let grads = graph.tape.backward(total);
    let out = graph
        .param_vars
        .iter()
        .zip(&params.tensors)
        .map(|(&v, t)| {
            grads
                .get(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.data.len()])
        })
        .collect();
    Ok((values, out))
}

/// Position `counter` of the infinite shuffled sample stream.
fn shuffled_index(seed: u64, counter: u64, n: usize) -> usize {
    let epoch = counter / n as u64;
    let pos = (counter % n as u64) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(crate::dataset::mix(seed, epoch, 7));
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order[pos]
}

/// Mean over the split of each sample's mean endpoint error.
pub fn validation_epe(
    samples: &[LoadedSample],
    k_norm: &[f64],
    params: &ModelParams,
) -> Result<f64> {
    let mut total = 0.0;
    for (sample, &k) in samples.iter().zip(k_norm) {
        let out = forward(&sample.deformed, sample.record.force_n, k, params)?;
        let (_, stats) = epe(&out.flow, &sample.gt)?;
        total += stats.mean;
    }
    Ok(total / samples.len() as f64)
}

fn build_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if jobs > 0 {
        builder = builder.num_threads(jobs);
    }
    builder
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))
}
