//! Versioned binary checkpoints: stage-tagged, hash-verified, and
//! bit-exact across a save/load round trip for the f32 pipeline.
//!
//! Layout (little endian): magic, format version, stage tag, step,
//! optional upstream latent-model hash, optional identity anchor,
//! config echo as JSON, named tensors, then a SHA-256 of everything
//! before it. Tensor payloads are f32 on disk; f64 models narrow on
//! write and widen on read.

use ndarray::{Array2, ArrayD, IxDyn};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::flow::{FlowConfig, FlowModel};
use crate::lam::{LamConfig, LamModel};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"SPINLAM\0";
pub const FORMAT_VERSION: u32 = 1;

/// Pipeline stage that produced a checkpoint. Loading a checkpoint into
/// the wrong stage's command fails fast on this tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Lam,
    VlaPretrain,
    Finetune,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Lam => "lam",
            Stage::VlaPretrain => "vla-pretrain",
            Stage::Finetune => "finetune",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Stage> {
        match tag {
            "lam" => Ok(Stage::Lam),
            "vla-pretrain" => Ok(Stage::VlaPretrain),
            "finetune" => Ok(Stage::Finetune),
            other => Err(CoreError::DataFormat(format!(
                "unknown checkpoint stage tag {:?}",
                other
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub stage: Stage,
    pub step: u64,
    /// JSON echo of the model config the tensors belong to.
    pub config_json: String,
    /// Content hash of the latent-model checkpoint a flow checkpoint was
    /// trained against; absent on latent-model checkpoints.
    pub lam_hash: Option<[u8; 32]>,
    /// Identity anchor from the end of latent-model training; absent on
    /// flow checkpoints and on models that were never trained.
    pub z_identity: Option<Array2<T>>,
    pub tensors: Vec<(String, ArrayD<T>)>,
}

fn collect_tensors<T: Scalar>(pv: &crate::nn::ParamVec<T>) -> Vec<(String, ArrayD<T>)> {
    pv.iter_named()
        .map(|(name, value)| (name.to_string(), value.clone()))
        .collect()
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_lam(model: &LamModel<T>, step: u64) -> Result<Checkpoint<T>> {
        Ok(Checkpoint {
            stage: Stage::Lam,
            step,
            config_json: serde_json::to_string(model.config())
                .map_err(|e| CoreError::DataFormat(format!("config echo failed: {}", e)))?,
            lam_hash: None,
            z_identity: model.z_identity().cloned(),
            tensors: collect_tensors(model.params()),
        })
    }

    pub fn from_flow(
        model: &FlowModel<T>,
        stage: Stage,
        step: u64,
        lam_hash: Option<[u8; 32]>,
    ) -> Result<Checkpoint<T>> {
        if stage == Stage::Lam {
            return Err(CoreError::InvalidInput(
                "a flow expert cannot carry the latent-model stage tag".to_string(),
            ));
        }
        Ok(Checkpoint {
            stage,
            step,
            config_json: serde_json::to_string(model.config())
                .map_err(|e| CoreError::DataFormat(format!("config echo failed: {}", e)))?,
            lam_hash,
            z_identity: None,
            tensors: collect_tensors(model.params()),
        })
    }

    pub fn expect_stage(&self, expected: Stage) -> Result<()> {
        if self.stage != expected {
            return Err(CoreError::StageMismatch {
                expected: expected.tag().to_string(),
                got: self.stage.tag().to_string(),
            });
        }
        Ok(())
    }

    /// Rebuilds the latent model this checkpoint was saved from.
    pub fn restore_lam(&self) -> Result<LamModel<T>> {
        self.expect_stage(Stage::Lam)?;
        let cfg: LamConfig = serde_json::from_str(&self.config_json)
            .map_err(|e| CoreError::DataFormat(format!("bad latent-model config echo: {}", e)))?;
        let mut model = LamModel::new(&cfg, 0)?;
        self.restore_params(model.params_mut())?;
        if let Some(z) = &self.z_identity {
            model.set_z_identity(z.clone())?;
        }
        Ok(model)
    }

    /// Rebuilds the flow expert; accepts either flow stage. Callers that
    /// require one specific stage check with expect_stage first.
    pub fn restore_flow(&self) -> Result<FlowModel<T>> {
        if self.stage == Stage::Lam {
            return Err(CoreError::StageMismatch {
                expected: "vla-pretrain or finetune".to_string(),
                got: Stage::Lam.tag().to_string(),
            });
        }
        let cfg: FlowConfig = serde_json::from_str(&self.config_json)
            .map_err(|e| CoreError::DataFormat(format!("bad flow config echo: {}", e)))?;
        let mut model = FlowModel::new(&cfg, 0)?;
        self.restore_params(model.params_mut())?;
        Ok(model)
    }

    fn restore_params(&self, pv: &mut crate::nn::ParamVec<T>) -> Result<()> {
        if self.tensors.len() != pv.len() {
            return Err(CoreError::DataFormat(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                pv.len()
            )));
        }
        for (name, value) in &self.tensors {
            pv.restore(name, value.clone())?;
        }
        Ok(())
    }

    /// Serializes to bytes; the final 32 bytes are the content hash.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let tag = self.stage.tag().as_bytes();
        out.push(tag.len() as u8);
        out.extend_from_slice(tag);
        out.extend_from_slice(&self.step.to_le_bytes());
        match &self.lam_hash {
            Some(h) => {
                out.push(1);
                out.extend_from_slice(h);
            }
            None => out.push(0),
        }
        match &self.z_identity {
            Some(z) => {
                out.push(1);
                let (r, c) = z.dim();
                out.extend_from_slice(&(r as u64).to_le_bytes());
                out.extend_from_slice(&(c as u64).to_le_bytes());
                for &v in z.iter() {
                    out.extend_from_slice(&v.to_f32().to_le_bytes());
                }
            }
            None => out.push(0),
        }
        let cfg = self.config_json.as_bytes();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, value) in &self.tensors {
            let nb = name.as_bytes();
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(value.ndim() as u8);
            for &d in value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in value.iter() {
                out.extend_from_slice(&v.to_f32().to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn save(&self, path: &Path) -> Result<[u8; 32]> {
        let bytes = self.to_bytes();
        let mut hash = [0u8; 32];
        hash.copy_from_slice(&bytes[bytes.len() - 32..]);
        fs::write(path, &bytes)?;
        Ok(hash)
    }

    /// Parses and hash-verifies a serialized checkpoint, returning the
    /// checkpoint alongside its content hash.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Checkpoint<T>, [u8; 32])> {
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(CoreError::DataFormat(
                "checkpoint file is too short".to_string(),
            ));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        let digest = Sha256::digest(body);
        if digest.as_slice() != trailer {
            return Err(CoreError::Checksum(
                "checkpoint content hash does not match".to_string(),
            ));
        }
        let mut hash = [0u8; 32];
        hash.copy_from_slice(trailer);

        let mut cur = Cursor { buf: body, pos: 0 };
        if cur.take(MAGIC.len())? != MAGIC.as_slice() {
            return Err(CoreError::DataFormat(
                "not a checkpoint file (bad magic)".to_string(),
            ));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CoreError::DataFormat(format!(
                "unsupported checkpoint format version {}",
                version
            )));
        }
        let tag_len = cur.take(1)?[0] as usize;
        let tag = std::str::from_utf8(cur.take(tag_len)?)
            .map_err(|_| CoreError::DataFormat("stage tag is not utf-8".to_string()))?
            .to_string();
        let stage = Stage::from_tag(&tag)?;
        let step = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        let lam_hash = match cur.take(1)?[0] {
            0 => None,
            1 => {
                let mut h = [0u8; 32];
                h.copy_from_slice(cur.take(32)?);
                Some(h)
            }
            other => {
                return Err(CoreError::DataFormat(format!(
                    "bad upstream-hash flag {}",
                    other
                )))
            }
        };
        let z_identity = match cur.take(1)?[0] {
            0 => None,
            1 => {
                let r = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
                let c = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
                let mut data = Vec::with_capacity(r * c);
                for _ in 0..r * c {
                    let v = f32::from_le_bytes(cur.take(4)?.try_into().unwrap());
                    data.push(T::from_f32(v));
                }
                let z = Array2::from_shape_vec((r, c), data)
                    .map_err(|e| CoreError::DataFormat(format!("identity anchor: {}", e)))?;
                Some(z)
            }
            other => {
                return Err(CoreError::DataFormat(format!(
                    "bad identity-anchor flag {}",
                    other
                )))
            }
        };
        let cfg_len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let config_json = std::str::from_utf8(cur.take(cfg_len)?)
            .map_err(|_| CoreError::DataFormat("config echo is not utf-8".to_string()))?
            .to_string();
        let count = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| CoreError::DataFormat("tensor name is not utf-8".to_string()))?
                .to_string();
            let ndim = cur.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize);
            }
            let len: usize = dims.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                let v = f32::from_le_bytes(cur.take(4)?.try_into().unwrap());
                data.push(T::from_f32(v));
            }
            let value = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| CoreError::DataFormat(format!("tensor {}: {}", name, e)))?;
            tensors.push((name, value));
        }
        if cur.pos != body.len() {
            return Err(CoreError::DataFormat(
                "trailing bytes after checkpoint payload".to_string(),
            ));
        }
        Ok((
            Checkpoint {
                stage,
                step,
                config_json,
                lam_hash,
                z_identity,
                tensors,
            },
            hash,
        ))
    }

    pub fn load(path: &Path) -> Result<(Checkpoint<T>, [u8; 32])> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CoreError::DataFormat(
                "checkpoint file is truncated".to_string(),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}
