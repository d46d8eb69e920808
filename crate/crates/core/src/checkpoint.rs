//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!   magic    4 bytes  "SPCE"
//!   version  u32      (currently 1)
//!   meta     u64 length + JSON bytes (run config + resolved schema)
//!   step     u64
//!   adam_t   u64
//!   rng      u64 count + that many u64 state words
//!   params   u64 count, then per parameter:
//!              u64 name length + name bytes,
//!              u8 dtype tag (0 = f32),
//!              u64 rank + u64 dims,
//!              raw little-endian values
//!   moments  per parameter m then per parameter v, raw f32 values
//!            (shapes mirror the parameters)
//!
//! save → load → save is byte-identical; loading validates magic, version
//! and shape agreement against a model rebuilt from the embedded config.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::ProfileSchema;
use crate::model::{Model, ParamId};
use crate::optim::AdamW;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SPCE";
pub const VERSION: u32 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    BadMagic,
    VersionMismatch { found: u32, expected: u32 },
    Truncated,
    ShapeMismatch { name: String, found: Vec<usize>, expected: Vec<usize> },
    Malformed(String),
    Io(std::io::Error),
}

impl std::fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CheckpointError::BadMagic => write!(f, "bad magic: not a checkpoint file"),
            CheckpointError::VersionMismatch { found, expected } => {
                write!(f, "version mismatch: file is v{found}, reader expects v{expected}")
            }
            CheckpointError::Truncated => write!(f, "truncated checkpoint file"),
            CheckpointError::ShapeMismatch { name, found, expected } => write!(
                f,
                "parameter {name}: shape {found:?} disagrees with config-derived {expected:?}"
            ),
            CheckpointError::Malformed(m) => write!(f, "malformed checkpoint: {m}"),
            CheckpointError::Io(e) => write!(f, "checkpoint io error: {e}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated
        } else {
            CheckpointError::Io(e)
        }
    }
}

/// Config blob embedded in the file: the run configuration plus the
/// resolved schema (so evaluation does not depend on external schema
/// files).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub schema: ProfileSchema,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub step: u64,
    pub adam_t: u64,
    pub rng_words: Vec<u64>,
    pub params: Vec<(String, Tensor<f32>)>,
    pub moment_m: Vec<Tensor<f32>>,
    pub moment_v: Vec<Tensor<f32>>,
}

fn w_u64(out: &mut impl Write, v: u64) -> Result<(), CheckpointError> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn r_u64(inp: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    inp.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn w_tensor(out: &mut impl Write, t: &Tensor<f32>) -> Result<(), CheckpointError> {
    for &v in t.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn r_tensor(inp: &mut impl Read, shape: &[usize]) -> Result<Tensor<f32>, CheckpointError> {
    let n = crate::tensor::numel(shape);
    let mut bytes = vec![0u8; n * 4];
    inp.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Tensor::new(shape.to_vec(), data).expect("length matches shape"))
}

impl Checkpoint {
    /// Snapshot the current training state.
    pub fn capture(
        meta: CheckpointMeta,
        model: &Model<f32>,
        opt: &AdamW,
        step: u64,
        rng_words: Vec<u64>,
    ) -> Checkpoint {
        let params = model
            .params
            .iter()
            .map(|(_, name, value)| (name.to_string(), value.clone()))
            .collect();
        Checkpoint {
            meta,
            step,
            adam_t: opt.t,
            rng_words,
            params,
            moment_m: opt.m.clone(),
            moment_v: opt.v.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        w_u64(&mut out, meta.len() as u64)?;
        out.write_all(&meta)?;
        w_u64(&mut out, self.step)?;
        w_u64(&mut out, self.adam_t)?;
        w_u64(&mut out, self.rng_words.len() as u64)?;
        for &w in &self.rng_words {
            w_u64(&mut out, w)?;
        }
        w_u64(&mut out, self.params.len() as u64)?;
        for (name, tensor) in &self.params {
            w_u64(&mut out, name.len() as u64)?;
            out.write_all(name.as_bytes())?;
            out.write_all(&[0u8])?; // dtype tag: f32
            w_u64(&mut out, tensor.rank() as u64)?;
            for &d in tensor.shape() {
                w_u64(&mut out, d as u64)?;
            }
            w_tensor(&mut out, tensor)?;
        }
        for m in &self.moment_m {
            w_tensor(&mut out, m)?;
        }
        for v in &self.moment_v {
            w_tensor(&mut out, v)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let mut inp = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        inp.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut vb = [0u8; 4];
        inp.read_exact(&mut vb)?;
        let version = u32::from_le_bytes(vb);
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch { found: version, expected: VERSION });
        }
        let meta_len = r_u64(&mut inp)? as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        inp.read_exact(&mut meta_bytes)?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let step = r_u64(&mut inp)?;
        let adam_t = r_u64(&mut inp)?;
        let n_rng = r_u64(&mut inp)? as usize;
        if n_rng > 1024 {
            return Err(CheckpointError::Malformed(format!("implausible rng count {n_rng}")));
        }
        let mut rng_words = Vec::with_capacity(n_rng);
        for _ in 0..n_rng {
            rng_words.push(r_u64(&mut inp)?);
        }
        let n_params = r_u64(&mut inp)? as usize;
        if n_params > 1_000_000 {
            return Err(CheckpointError::Malformed(format!(
                "implausible parameter count {n_params}"
            )));
        }
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name_len = r_u64(&mut inp)? as usize;
            if name_len > 4096 {
                return Err(CheckpointError::Malformed(format!(
                    "implausible name length {name_len}"
                )));
            }
            let mut name_bytes = vec![0u8; name_len];
            inp.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            let mut tag = [0u8; 1];
            inp.read_exact(&mut tag)?;
            if tag[0] != 0 {
                return Err(CheckpointError::Malformed(format!(
                    "parameter {name}: unsupported dtype tag {}",
                    tag[0]
                )));
            }
            let rank = r_u64(&mut inp)? as usize;
            if rank > 8 {
                return Err(CheckpointError::Malformed(format!("implausible rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r_u64(&mut inp)? as usize);
            }
            let tensor = r_tensor(&mut inp, &shape)?;
            params.push((name, tensor));
        }
        let mut moment_m = Vec::with_capacity(n_params);
        for i in 0..n_params {
            moment_m.push(r_tensor(&mut inp, params[i].1.shape())?);
        }
        let mut moment_v = Vec::with_capacity(n_params);
        for i in 0..n_params {
            moment_v.push(r_tensor(&mut inp, params[i].1.shape())?);
        }
        // Trailing garbage is as suspicious as a short file.
        let mut extra = [0u8; 1];
        match inp.read(&mut extra) {
            Ok(0) => {}
            Ok(_) => return Err(CheckpointError::Malformed("trailing bytes".to_string())),
            Err(e) => return Err(e.into()),
        }
        Ok(Checkpoint { meta, step, adam_t, rng_words, params, moment_m, moment_v })
    }

    /// Rebuild the model this checkpoint was taken from, validating every
    /// parameter's shape against the config-derived architecture.
    pub fn into_model(&self) -> Result<(Model<f32>, AdamW), CheckpointError> {
        let mut model =
            Model::<f32>::new(self.meta.config.model.clone(), self.meta.schema.clone(), 0)
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        if model.params.len() != self.params.len() {
            return Err(CheckpointError::Malformed(format!(
                "checkpoint has {} parameters, config-derived model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (name, tensor) in &self.params {
            let id = model.params.find(name).ok_or_else(|| {
                CheckpointError::Malformed(format!("unknown parameter {name}"))
            })?;
            let expected = model.params.value(id).shape().to_vec();
            if tensor.shape() != expected.as_slice() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    found: tensor.shape().to_vec(),
                    expected,
                });
            }
            *model.params.value_mut(id) = tensor.clone();
        }
        let mut opt = AdamW::new(&model.params, &self.meta.config.train);
        opt.t = self.adam_t;
        for (i, (m, v)) in self.moment_m.iter().zip(self.moment_v.iter()).enumerate() {
            let expected = model.params.value(ParamId(i)).shape();
            if m.shape() != expected || v.shape() != expected {
                return Err(CheckpointError::ShapeMismatch {
                    name: self.params[i].0.clone(),
                    found: m.shape().to_vec(),
                    expected: expected.to_vec(),
                });
            }
        }
        opt.m = self.moment_m.clone();
        opt.v = self.moment_v.clone();
        Ok((model, opt))
    }
}
