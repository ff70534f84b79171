//! Binary checkpoint, little-endian:
//!
//! ```text
//! "PFCK" | u32 version | [u8; 32] config digest | u8 algorithm | u32 round | u64 seed
//! | u32 classes | u32 channels | u32 image size | u32 text_len | config text
//! | fragments: norm mean, norm std, η_h, η_v, velocity_h, velocity_v, θ_global
//! | f64 grad-norm sum | u32 grad-norm count
//! ```
//!
//! Every random stream is derived from `(seed, round)`, so the seed and the
//! round index are the complete RNG state.

use std::path::Path;

use super::{Algorithm, ExperimentConfig, ExperimentError};
use crate::data::Normalization;
use crate::models::ImageGeometry;
use crate::nn::{decode_fragment, encode_fragment};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub algorithm: Algorithm,
    pub round: u32,
    pub seed: u64,
    pub classes: usize,
    pub geometry: ImageGeometry,
    pub config_text: String,
    pub normalization: Normalization,
    pub eta_h: Vec<f32>,
    pub eta_v: Vec<f32>,
    pub velocity_h: Vec<f32>,
    pub velocity_v: Vec<f32>,
    pub theta: Vec<f32>,
    pub grad_norm_sum: f64,
    pub grad_norm_count: u32,
}

fn bad(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ExperimentError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            bad(format!("truncated at offset {}: need {n} more bytes", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ExperimentError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ExperimentError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ExperimentError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn vector(&mut self, what: &str) -> Result<Vec<f32>, ExperimentError> {
        let (dims, values) =
            decode_fragment::<f32>(self.bytes, &mut self.pos).map_err(|e| bad(format!("{what}: {e}")))?;
        if dims.len() != 1 {
            return Err(bad(format!("{what}: expected a vector, got dims {dims:?}")));
        }
        Ok(values)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.push(self.algorithm.code());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for v in [self.classes, self.geometry.channels, self.geometry.size, self.config_text.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(self.config_text.as_bytes());
        for v in [
            &self.normalization.mean,
            &self.normalization.std,
            &self.eta_h,
            &self.eta_v,
            &self.velocity_h,
            &self.velocity_v,
            &self.theta,
        ] {
            encode_fragment(&[v.len()], v, &mut out).expect("rank-1 fragment");
        }
        out.extend_from_slice(&self.grad_norm_sum.to_le_bytes());
        out.extend_from_slice(&self.grad_norm_count.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ExperimentError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let code = r.u8()?;
        let algorithm = Algorithm::from_code(code).ok_or_else(|| bad(format!("unknown algorithm code {code}")))?;
        let round = r.u32()?;
        let seed = r.u64()?;
        let classes = r.u32()? as usize;
        let geometry = ImageGeometry { channels: r.u32()? as usize, size: r.u32()? as usize };
        let text_len = r.u32()? as usize;
        let config_text =
            String::from_utf8(r.take(text_len)?.to_vec()).map_err(|_| bad("config text is not UTF-8"))?;
        let mean = r.vector("normalization mean")?;
        let std = r.vector("normalization std")?;
        let ck = Checkpoint {
            digest,
            algorithm,
            round,
            seed,
            classes,
            geometry,
            config_text,
            normalization: Normalization { mean, std },
            eta_h: r.vector("eta_h")?,
            eta_v: r.vector("eta_v")?,
            velocity_h: r.vector("velocity_h")?,
            velocity_v: r.vector("velocity_v")?,
            theta: r.vector("theta")?,
            grad_norm_sum: f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")),
            grad_norm_count: r.u32()?,
        };
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), ExperimentError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| ExperimentError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| ExperimentError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let bytes = std::fs::read(path).map_err(|e| ExperimentError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// The stored configuration, checked against the stored digest.
    pub fn config(&self) -> Result<ExperimentConfig, ExperimentError> {
        let cfg = ExperimentConfig::parse(&self.config_text)?;
        if cfg.digest() != self.digest {
            return Err(bad("stored configuration does not match its digest"));
        }
        Ok(cfg)
    }

    /// Fails unless this checkpoint was produced by `cfg`.
    pub fn check_matches(&self, cfg: &ExperimentConfig) -> Result<(), ExperimentError> {
        if cfg.digest() != self.digest {
            return Err(bad("checkpoint was written for a different configuration"));
        }
        if cfg.run.seed != self.seed {
            return Err(bad(format!("checkpoint seed {} differs from run seed {}", self.seed, cfg.run.seed)));
        }
        Ok(())
    }
}
