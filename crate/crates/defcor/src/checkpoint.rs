//! Checkpoint file: a length-prefixed JSON header (architecture config,
//! stiffness population, tensor table, format version) followed by the
//! named f32 LE parameter blobs in table order. Optimizer moments ride
//! along as additional `adam.*` blobs so training resumes bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::calib::StiffnessPopulation;
use crate::error::{Error, Result};
use crate::net::{ModelParams, NetConfig, ParamTensor};
use crate::tape::Shape;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 3],
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: NetConfig,
    stiffness_population: Option<StiffnessPopulation>,
    tensors: Vec<TensorEntry>,
    adam_step: Option<u64>,
}

/// Optimizer state paired with its global step counter.
pub struct TrainingState {
    pub adam: AdamState,
    pub step: u64,
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    training: Option<&TrainingState>,
) -> Result<()> {
    let mut entries: Vec<TensorEntry> = params
        .tensors
        .iter()
        .map(|t| TensorEntry {
            name: t.name.clone(),
            shape: [t.shape.c, t.shape.h, t.shape.w],
        })
        .collect();
    let mut blobs: Vec<&[f64]> = params.tensors.iter().map(|t| t.data.as_slice()).collect();
    if let Some(ts) = training {
        for (which, vecs) in [("m", &ts.adam.m), ("v", &ts.adam.v)] {
            for (t, data) in params.tensors.iter().zip(vecs) {
                entries.push(TensorEntry {
                    name: format!("adam.{which}.{}", t.name),
                    shape: [t.shape.c, t.shape.h, t.shape.w],
                });
                blobs.push(data.as_slice());
            }
        }
    }
    let header = Header {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: params.config.clone(),
        stiffness_population: params.population,
        tensors: entries,
        adam_step: training.map(|t| t.step),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;

    let mut bytes = Vec::new();
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for blob in blobs {
        for &v in blob {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Option<TrainingState>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 4 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let hlen = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    if bytes.len() < 4 + hlen {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[4..4 + hlen])
        .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }

    let mut offset = 4 + hlen;
    let mut read_blob = |len: usize| -> Result<Vec<f64>> {
        let need = len * 4;
        if bytes.len() < offset + need {
            return Err(Error::Checkpoint("truncated tensor data".into()));
        }
        let out = bytes[offset..offset + need]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        offset += need;
        Ok(out)
    };

    // the expected tensor table comes from the architecture config
    let template = ModelParams::init(header.config.clone(), 0);
    let mut tensors: Vec<ParamTensor> = Vec::with_capacity(template.tensors.len());
    let mut adam_m: Vec<Vec<f64>> = Vec::new();
    let mut adam_v: Vec<Vec<f64>> = Vec::new();
    for entry in &header.tensors {
        let shape = Shape::new(entry.shape[0], entry.shape[1], entry.shape[2]);
        let data = read_blob(shape.len())?;
        if let Some(base) = entry.name.strip_prefix("adam.m.") {
            expect_tensor(&template, base, shape)?;
            adam_m.push(data);
        } else if let Some(base) = entry.name.strip_prefix("adam.v.") {
            expect_tensor(&template, base, shape)?;
            adam_v.push(data);
        } else {
            expect_tensor(&template, &entry.name, shape)?;
            tensors.push(ParamTensor {
                name: entry.name.clone(),
                shape,
                data,
            });
        }
    }
    if tensors.len() != template.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter tensors, found {}",
            template.tensors.len(),
            tensors.len()
        )));
    }
    let params = ModelParams {
        config: header.config,
        tensors,
        population: header.stiffness_population,
    };
    let training = match header.adam_step {
        Some(step) => {
            if adam_m.len() != params.tensors.len() || adam_v.len() != params.tensors.len() {
                return Err(Error::Checkpoint("incomplete optimizer state".into()));
            }
            Some(TrainingState {
                adam: AdamState {
                    m: adam_m,
                    v: adam_v,
                    t: step,
                },
                step,
            })
        }
        None => None,
    };
    Ok((params, training))
}

fn expect_tensor(template: &ModelParams, name: &str, shape: Shape) -> Result<()> {
    let expected = template
        .tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name:?}")))?;
    if expected.shape != shape {
        return Err(Error::Checkpoint(format!(
            "tensor {name:?}: shape {:?} does not match architecture {:?}",
            shape, expected.shape
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut params = ModelParams::init(NetConfig::default(), 77);
        params.population = Some(StiffnessPopulation {
            mu_g: 1.4,
            delta_g: 0.3,
            n: 12,
        });
        save_checkpoint(&path, &params, None).unwrap();
        let bytes1 = fs::read(&path).unwrap();
        let (loaded, training) = load_checkpoint(&path).unwrap();
        assert!(training.is_none());
        assert_eq!(loaded.population, params.population);
        for (a, b) in loaded.tensors.iter().zip(&params.tensors) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.data, b.data);
        }
        save_checkpoint(&path, &loaded, None).unwrap();
        let bytes2 = fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn optimizer_state_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = ModelParams::init(NetConfig::default(), 5);
        let mut adam = AdamState::new(&params);
        adam.t = 42;
        adam.m[0][0] = 0.125;
        adam.v[3][1] = 0.5;
        let ts = TrainingState { adam, step: 42 };
        save_checkpoint(&path, &params, Some(&ts)).unwrap();
        let (_, training) = load_checkpoint(&path).unwrap();
        let training = training.unwrap();
        assert_eq!(training.step, 42);
        assert_eq!(training.adam.t, 42);
        assert_eq!(training.adam.m[0][0], 0.125);
        assert_eq!(training.adam.v[3][1], 0.5);
    }

    #[test]
    fn shape_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = ModelParams::init(
            NetConfig {
                channels: [4, 8, 16],
                leaky_slope: 0.01,
            },
            5,
        );
        save_checkpoint(&path, &params, None).unwrap();
        // corrupt the header's claimed channel widths
        let mut bytes = fs::read(&path).unwrap();
        let hlen = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let mut text = String::from_utf8(bytes[4..4 + hlen].to_vec()).unwrap();
        text = text.replace("[4,8,16]", "[8,8,16]");
        assert_eq!(text.len(), hlen, "patched header must keep its length");
        bytes[4..4 + hlen].copy_from_slice(text.as_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(_))
        ));
    }
}
