// SPDX-License-Identifier: Apache-2.0

//! `EMB1` embedding files for exchanging features with external encoders.
//!
//! Layout (little-endian): magic `EMB1`, version `u16`, count `u32`,
//! dim `u32`, dtype tag `u8` (1 = f32, 2 = f64), `count × dim` row-major
//! values, then optionally a labels block of `count: u32` and `count` `i32`.
//! A JSON sidecar `{source, model_name, dim, count, sha256}` hashes the
//! payload bytes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{lame_refine, LameConfig, LameOutput};
use crate::container::Reader;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tta::{argmax, compute_q, normalize_rows, zero_shot_probs, SimilarityBundle};

pub const MAGIC: &[u8; 4] = b"EMB1";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            t => Err(Error::Format(format!("unknown dtype tag {t}"))),
        }
    }
}

/// A `[count, dim]` matrix with optional per-row labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub dtype: DType,
    pub count: usize,
    pub dim: usize,
    /// Row-major values widened to `f64`.
    pub data: Vec<f64>,
    pub labels: Option<Vec<i32>>,
}

impl EmbeddingFile {
    pub fn new(matrix: &Tensor, labels: Option<Vec<i32>>, dtype: DType) -> Result<Self> {
        if matrix.shape().len() != 2 {
            return Err(Error::dim("embeddings", format!("expected a matrix, got {:?}", matrix.shape())));
        }
        if !matrix.is_finite() {
            return Err(Error::numeric("embeddings", "non-finite values"));
        }
        if let Some(l) = &labels {
            if l.len() != matrix.rows() {
                return Err(Error::dim("embeddings", format!("{} labels for {} rows", l.len(), matrix.rows())));
            }
        }
        let data = match dtype {
            DType::F64 => matrix.data().to_vec(),
            DType::F32 => matrix.data().iter().map(|&v| v as f32 as f64).collect(),
        };
        Ok(Self {
            dtype,
            count: matrix.rows(),
            dim: matrix.cols(),
            data,
            labels,
        })
    }

    /// The stored values as a `[count, dim]` tensor.
    pub fn matrix(&self) -> Tensor {
        Tensor::matrix(self.count, self.dim, self.data.clone()).expect("validated on construction")
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * self.dtype.size());
        match self.dtype {
            DType::F64 => self.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            DType::F32 => self.data.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        }
        out
    }

    pub fn payload_sha256(&self) -> String {
        hex::encode(Sha256::digest(self.payload()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let count = u32::try_from(self.count).map_err(|_| Error::Format("count exceeds u32".into()))?;
        let dim = u32::try_from(self.dim).map_err(|_| Error::Format("dim exceeds u32".into()))?;
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * self.dtype.size());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&dim.to_le_bytes());
        out.push(self.dtype.tag());
        out.extend_from_slice(&self.payload());
        if let Some(labels) = &self.labels {
            out.extend_from_slice(&count.to_le_bytes());
            labels.iter().for_each(|l| out.extend_from_slice(&l.to_le_bytes()));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}, expected EMB1", String::from_utf8_lossy(magic))));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported embedding file version {version}")));
        }
        let count = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let dtype = DType::from_tag(r.take(1)?[0])?;
        let payload = r.take(count * dim * dtype.size())?;
        let data: Vec<f64> = match dtype {
            DType::F64 => payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        let labels = if r.pos == bytes.len() {
            None
        } else {
            let n = r.u32()? as usize;
            if n != count {
                return Err(Error::Format(format!("labels block has {n} entries for {count} rows")));
            }
            let raw = r.take(4 * n)?;
            if r.pos != bytes.len() {
                return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
            }
            Some(raw.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect())
        };
        Ok(Self {
            dtype,
            count,
            dim,
            data,
            labels,
        })
    }
}

pub fn write_embeddings(path: &Path, file: &EmbeddingFile) -> Result<()> {
    std::fs::write(path, file.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingFile::from_bytes(&bytes)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingManifest {
    pub source: String,
    pub model_name: String,
    pub dim: usize,
    pub count: usize,
    pub sha256: String,
}

impl EmbeddingManifest {
    pub fn describe(file: &EmbeddingFile, source: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            model_name: model_name.into(),
            dim: file.dim,
            count: file.count,
            sha256: file.payload_sha256(),
        }
    }

    /// Whether `file` matches the recorded shape and payload hash.
    pub fn matches(&self, file: &EmbeddingFile) -> bool {
        self.dim == file.dim && self.count == file.count && self.sha256 == file.payload_sha256()
    }
}

/// The sidecar path used next to an embedding file: `<path>.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the embedding file and its JSON sidecar.
pub fn write_with_manifest(path: &Path, file: &EmbeddingFile, source: &str, model_name: &str) -> Result<EmbeddingManifest> {
    write_embeddings(path, file)?;
    let manifest = EmbeddingManifest::describe(file, source, model_name);
    let mpath = manifest_path(path);
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<EmbeddingManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Gradient-free predictions over imported embeddings. No adaptation is
/// possible on this path since the encoder is not available.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenPrediction {
    pub probs: Tensor,
    pub top1: Vec<usize>,
}

pub fn frozen_predict(images: &EmbeddingFile, prompts: &EmbeddingFile, tau: f64) -> Result<FrozenPrediction> {
    if images.dim != prompts.dim {
        return Err(Error::dim(
            "frozen_predict",
            format!("image dim {} vs prompt dim {}", images.dim, prompts.dim),
        ));
    }
    if prompts.count == 0 {
        return Err(Error::InvalidArgument("prompt file has no rows".into()));
    }
    if images.count == 0 {
        return Ok(FrozenPrediction {
            probs: Tensor::zeros(&[0, prompts.count]),
            top1: Vec::new(),
        });
    }
    let probs = zero_shot_probs(&images.matrix(), &prompts.matrix(), tau)?;
    let top1 = (0..probs.rows()).map(|i| argmax(probs.row(i))).collect();
    Ok(FrozenPrediction { probs, top1 })
}

/// LAME refinement of frozen predictions using the imported image rows.
pub fn frozen_lame(images: &EmbeddingFile, prediction: &FrozenPrediction, config: &LameConfig) -> Result<LameOutput> {
    lame_refine(&normalize_rows(&images.matrix())?, &prediction.probs, config)
}

/// Pseudo-label and prediction matrices over imported image rows and
/// imported per-image instance-prompt rows.
pub fn frozen_similarity(images: &EmbeddingFile, instance_prompts: &EmbeddingFile, tau: f64) -> Result<SimilarityBundle> {
    let zv = normalize_rows(&images.matrix())?;
    let zt = normalize_rows(&instance_prompts.matrix())?;
    compute_q(&zv, &zt, tau)
}
