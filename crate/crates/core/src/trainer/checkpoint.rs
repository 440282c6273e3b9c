//! `JPDVT1` container: named f32 records followed by a CRC32.
//!
//! Non-tensor state is stored as records too. Text is one byte per value;
//! 64-bit integers and doubles are split into four 16-bit chunks, which f32
//! holds exactly.

use std::path::Path;

use tensorlab::{AdamConfig, AdamState, ParamStore, Tensor};
use thiserror::Error;

use super::TrainConfig;
use crate::denoiser::{check_params, DenoiserConfig};
use crate::diffusion::ScheduleParams;
use crate::error::{write_atomic, Error, Result};

pub const MAGIC: &[u8; 6] = b"JPDVT1";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: String },
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { expected: u16, found: u16 },
    #[error("checkpoint truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("record {name:?}: {detail}")]
    ShapeHeader { name: String, detail: String },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },
    #[error("model config mismatch\n  expected: {expected}\n  found:    {found}")]
    ConfigMismatch { expected: String, found: String },
    #[error("checkpoint has no record {0:?}")]
    Missing(String),
}

/// Everything needed to resume training or to solve.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub train: TrainConfig,
    pub model: DenoiserConfig,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
    pub schedule: ScheduleParams,
    /// Optimizer steps taken; with `seed` this fixes every later random draw.
    pub step: u64,
    pub seed: u64,
}

fn split_u64(v: u64) -> Vec<f32> {
    (0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f32).collect()
}

fn join_u64(name: &str, v: &[f32]) -> Result<u64, CheckpointError> {
    let mut out = 0u64;
    for (i, &c) in v.iter().enumerate() {
        if !(0.0..=65535.0).contains(&c) || c.fract() != 0.0 {
            return Err(CheckpointError::ShapeHeader {
                name: name.into(),
                detail: format!("chunk {c} is not a 16-bit integer"),
            });
        }
        out |= (c as u64) << (16 * i);
    }
    Ok(out)
}

fn words(name: &str, t: &Tensor<f32>, count: usize) -> Result<Vec<u64>, CheckpointError> {
    if t.len() != 4 * count {
        return Err(CheckpointError::ShapeHeader {
            name: name.into(),
            detail: format!("expected {} values, found {}", 4 * count, t.len()),
        });
    }
    t.data().chunks(4).map(|c| join_u64(name, c)).collect()
}

fn encode_words(values: &[u64]) -> Tensor<f32> {
    let data: Vec<f32> = values.iter().flat_map(|&v| split_u64(v)).collect();
    Tensor::new(&[data.len()], data).expect("1-D")
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::invalid(e.to_string()))
}

fn encode_text(s: &str) -> Tensor<f32> {
    let data: Vec<f32> = s.bytes().map(f32::from).collect();
    Tensor::new(&[data.len()], data).expect("1-D")
}

fn decode_text(name: &str, t: &Tensor<f32>) -> Result<String, CheckpointError> {
    let bytes = t
        .data()
        .iter()
        .map(|&v| {
            if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(CheckpointError::ShapeHeader {
                    name: name.into(),
                    detail: "text record holds a non-byte value".into(),
                })
            }
        })
        .collect::<Result<Vec<u8>, _>>()?;
    String::from_utf8(bytes).map_err(|_| CheckpointError::ShapeHeader {
        name: name.into(),
        detail: "text record is not UTF-8".into(),
    })
}

/// Serializes named tensors in the container format.
pub fn encode_records(records: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated { offset: self.bytes.len() })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses the container; the checksum is verified after the structure, so a
/// short file reports truncation rather than a checksum failure.
pub fn decode_records(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
        });
    }
    let mut r = Reader {
        bytes,
        at: MAGIC.len(),
    };
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let count = r.u32()?;
    let mut records = Vec::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8_lossy(r.take(len)?).into_owned();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| CheckpointError::ShapeHeader {
                name: name.clone(),
                detail: format!("shape {shape:?} is larger than the file"),
            })?;
        let payload = r.take(numel * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::ShapeHeader {
            name: name.clone(),
            detail: e.to_string(),
        })?;
        records.push((name, t));
    }
    let body_end = r.at;
    let stored = r.u32()?;
    if r.at != bytes.len() {
        return Err(CheckpointError::ShapeHeader {
            name: String::new(),
            detail: format!("{} unexpected bytes after the checksum", bytes.len() - r.at),
        });
    }
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(CheckpointError::Crc { stored, computed });
    }
    Ok(records)
}

impl Checkpoint {
    pub fn to_records(&self) -> Result<Vec<(String, Tensor<f32>)>> {
        let a = self.adam.config;
        let mut out = vec![
            ("meta/train_json".to_string(), encode_text(&to_json(&self.train)?)),
            ("meta/model_json".to_string(), encode_text(&to_json(&self.model)?)),
            ("meta/step".to_string(), encode_words(&[self.step])),
            ("meta/seed".to_string(), encode_words(&[self.seed])),
            (
                "meta/schedule".to_string(),
                encode_words(&[
                    self.schedule.steps as u64,
                    self.schedule.beta_start.to_bits(),
                    self.schedule.beta_end.to_bits(),
                ]),
            ),
            (
                "meta/adam".to_string(),
                encode_words(&[
                    self.adam.step_count(),
                    a.lr.to_bits(),
                    a.beta1.to_bits(),
                    a.beta2.to_bits(),
                    a.eps.to_bits(),
                ]),
            ),
        ];
        for (name, t) in self.params.iter() {
            out.push((format!("param/{name}"), t.clone()));
        }
        for ((name, _), m) in self.params.iter().zip(self.adam.first_moments()) {
            out.push((format!("adam.m/{name}"), m.clone()));
        }
        for ((name, _), v) in self.params.iter().zip(self.adam.second_moments()) {
            out.push((format!("adam.v/{name}"), v.clone()));
        }
        Ok(out)
    }

    pub fn from_records(records: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        let mut map: std::collections::HashMap<String, Tensor<f32>> = records.into_iter().collect();
        let mut take = |name: &str| map.remove(name).ok_or_else(|| CheckpointError::Missing(name.into()));
        let train_json = decode_text("meta/train_json", &take("meta/train_json")?)?;
        let model_json = decode_text("meta/model_json", &take("meta/model_json")?)?;
        let bad = |name: &str, e: serde_json::Error| CheckpointError::ShapeHeader {
            name: name.into(),
            detail: e.to_string(),
        };
        let train: TrainConfig = serde_json::from_str(&train_json).map_err(|e| bad("meta/train_json", e))?;
        let model: DenoiserConfig = serde_json::from_str(&model_json).map_err(|e| bad("meta/model_json", e))?;
        let step = words("meta/step", &take("meta/step")?, 1)?[0];
        let seed = words("meta/seed", &take("meta/seed")?, 1)?[0];
        let s = words("meta/schedule", &take("meta/schedule")?, 3)?;
        let schedule = ScheduleParams {
            steps: s[0] as usize,
            beta_start: f64::from_bits(s[1]),
            beta_end: f64::from_bits(s[2]),
        };
        let a = words("meta/adam", &take("meta/adam")?, 5)?;
        let adam_cfg = AdamConfig {
            lr: f64::from_bits(a[1]),
            beta1: f64::from_bits(a[2]),
            beta2: f64::from_bits(a[3]),
            eps: f64::from_bits(a[4]),
        };
        let mut params = ParamStore::new();
        let (mut first, mut second) = (Vec::new(), Vec::new());
        for (name, shape) in model.param_shapes() {
            for (prefix, dst) in [("param/", None), ("adam.m/", Some(&mut first)), ("adam.v/", Some(&mut second))] {
                let key = format!("{prefix}{name}");
                let t = take(&key)?;
                if t.shape() != shape.as_slice() {
                    return Err(CheckpointError::ShapeHeader {
                        name: key,
                        detail: format!("expected shape {shape:?}, found {:?}", t.shape()),
                    }
                    .into());
                }
                match dst {
                    None => params.insert(name.clone(), t),
                    Some(v) => v.push(t),
                }
            }
        }
        if let Some(extra) = map.keys().min() {
            return Err(CheckpointError::ShapeHeader {
                name: extra.clone(),
                detail: "record not used by the model config".into(),
            }
            .into());
        }
        check_params(&model, &params)?;
        Ok(Self {
            train,
            model,
            params,
            adam: AdamState::from_parts(adam_cfg, a[0], first, second),
            schedule,
            step,
            seed,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(encode_records(&self.to_records()?))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_records(decode_records(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and requires the stored model config to equal `expected`.
    pub fn load_expecting(path: &Path, expected: &DenoiserConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        ckpt.expect_model(expected)?;
        Ok(ckpt)
    }

    pub fn expect_model(&self, expected: &DenoiserConfig) -> Result<()> {
        if &self.model != expected {
            let show = |c: &DenoiserConfig| serde_json::to_string(c).unwrap_or_else(|_| format!("{c:?}"));
            return Err(CheckpointError::ConfigMismatch {
                expected: show(expected),
                found: show(&self.model),
            }
            .into());
        }
        Ok(())
    }
}
