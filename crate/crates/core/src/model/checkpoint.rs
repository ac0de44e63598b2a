//! Checkpoint format, all little-endian:
//!
//! ```text
//! magic       "VALMCKPT"  8 bytes
//! version     u32         1
//! dtype       u8          0 = f32, 1 = f64
//! config      n_layers n_heads d_model vocab max_seq fusion_layer
//!             num_images ffn_mult (u32 each), proj_mode u8,
//!             ln_img_eps ln_eps dropout (f64 each)
//! tensors     u32 count, then per tensor in `ModelParams::specs` order:
//!             u32 ndim, ndim × u32 dims, numel × dtype values
//! checksum    u64         first 8 bytes of SHA-256 over everything above
//! ```
//!
//! Checkpoints are written as f64 so that a reload reproduces the in-memory
//! model bit for bit; f32 files are accepted on load.

use std::path::Path;

use super::{ModelConfig, ModelError, ModelParams, ModelState, ProjMode};
use crate::io::{atomic_write, checksum64, ByteReader, PutLe};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VALMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

fn put_config(out: &mut Vec<u8>, c: &ModelConfig) {
    for v in [
        c.n_layers,
        c.n_heads,
        c.d_model,
        c.vocab,
        c.max_seq,
        c.fusion_layer,
        c.num_images,
        c.ffn_mult,
    ] {
        out.put_u32(v as u32);
    }
    out.put_u8(c.proj_mode.code());
    out.put_f64(c.ln_img_eps);
    out.put_f64(c.ln_eps);
    out.put_f64(c.dropout);
}

impl ModelState {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        self.encode(DTYPE_F64)
    }

    /// Lossy f32 variant of the checkpoint.
    pub fn to_checkpoint_bytes_f32(&self) -> Vec<u8> {
        self.encode(DTYPE_F32)
    }

    fn encode(&self, dtype: u8) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.num_params() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.put_u32(CHECKPOINT_VERSION);
        out.put_u8(dtype);
        put_config(&mut out, &self.config);
        let specs = ModelParams::specs(&self.config);
        out.put_u32(specs.len() as u32);
        for (spec, t) in specs.iter().zip(self.params.tensors()) {
            out.put_u32(spec.shape.len() as u32);
            for &d in &spec.shape {
                out.put_u32(d as u32);
            }
            if dtype == DTYPE_F64 {
                out.put_f64s(t);
            } else {
                for &v in t.iter() {
                    out.put_f32(v as f32);
                }
            }
        }
        let sum = checksum64(&out);
        out.put_u64(sum);
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let corrupt = |why: &str| ModelError::CorruptCheckpoint(why.to_string());
        let trunc = |_| corrupt("truncated");
        if bytes.len() < CHECKPOINT_MAGIC.len() + 8 {
            return Err(corrupt("truncated"));
        }
        let (payload, tail) = bytes.split_at(bytes.len() - 8);
        let mut r = ByteReader::new(payload);
        if r.take(8).map_err(trunc)? != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        if ByteReader::new(tail).u64().map_err(trunc)? != checksum64(payload) {
            return Err(corrupt("checksum mismatch"));
        }
        let version = r.u32().map_err(trunc)?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let dtype = r.u8().map_err(trunc)?;
        if dtype != DTYPE_F32 && dtype != DTYPE_F64 {
            return Err(corrupt("unknown dtype"));
        }
        let mut dims = [0usize; 8];
        for d in dims.iter_mut() {
            *d = r.u32().map_err(trunc)? as usize;
        }
        let proj_mode =
            ProjMode::from_code(r.u8().map_err(trunc)?).ok_or_else(|| corrupt("unknown proj mode"))?;
        let config = ModelConfig {
            n_layers: dims[0],
            n_heads: dims[1],
            d_model: dims[2],
            vocab: dims[3],
            max_seq: dims[4],
            fusion_layer: dims[5],
            num_images: dims[6],
            ffn_mult: dims[7],
            proj_mode,
            ln_img_eps: r.f64().map_err(trunc)?,
            ln_eps: r.f64().map_err(trunc)?,
            dropout: r.f64().map_err(trunc)?,
        };
        config
            .validate()
            .map_err(|e| corrupt(&format!("stored config invalid: {e}")))?;
        let specs = ModelParams::specs(&config);
        if r.u32().map_err(trunc)? as usize != specs.len() {
            return Err(corrupt("tensor count"));
        }
        let mut params = ModelParams::zeros(&config);
        for (spec, t) in specs.iter().zip(params.tensors_mut()) {
            let ndim = r.u32().map_err(trunc)? as usize;
            if ndim != spec.shape.len() {
                return Err(corrupt(&format!("rank of {}", spec.name)));
            }
            for &want in &spec.shape {
                if r.u32().map_err(trunc)? as usize != want {
                    return Err(corrupt(&format!("shape of {}", spec.name)));
                }
            }
            *t = if dtype == DTYPE_F64 {
                r.f64_vec(t.len()).map_err(trunc)?
            } else {
                r.f32_vec(t.len())
                    .map_err(trunc)?
                    .into_iter()
                    .map(f64::from)
                    .collect()
            };
        }
        if r.remaining() != 0 {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        atomic_write(path, &self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }

    /// Loads a checkpoint and requires its architecture to match `expected`.
    /// Dropout is a training setting and is not compared.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self, ModelError> {
        let state = Self::load(path)?;
        let got = ModelConfig {
            dropout: expected.dropout,
            ..state.config
        };
        if got != *expected {
            return Err(ModelError::ConfigMismatch(format!(
                "checkpoint has {:?}, expected {:?}",
                state.config, expected
            )));
        }
        Ok(state)
    }
}
