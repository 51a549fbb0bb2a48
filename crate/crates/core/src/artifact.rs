//! DUQ1 artifact files.
//!
//! Layout:
//!
//! ```text
//! DUQ1 <header byte length>\n
//! <TOML header: version, kind, payload_bytes, sha256, arrays, meta>
//! <payload: little-endian f64 arrays in header order>
//! ```
//!
//! Nothing time dependent is written, so identical objects give identical
//! bytes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Mlp, Pmf};
use crate::posterior::PosteriorCovariance;
use crate::predict::{derive_seed, LogitGaussian, PmfEstimate};
use crate::train::TrainConfig;

pub const MAGIC: &str = "DUQ1";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactKind {
    Model,
    Posterior,
    Prediction,
}

impl std::fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ArtifactKind::Model => "model",
            ArtifactKind::Posterior => "posterior",
            ArtifactKind::Prediction => "prediction",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayDecl {
    name: String,
    len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: ArtifactKind,
    payload_bytes: u64,
    sha256: String,
    arrays: Vec<ArrayDecl>,
    meta: toml::Table,
}

/// Kind, metadata and named arrays of a decoded file.
struct Raw {
    kind: ArtifactKind,
    meta: toml::Table,
    arrays: Vec<(String, Vec<f64>)>,
}

impl Raw {
    fn new<M: Serialize>(kind: ArtifactKind, meta: &M) -> Result<Self> {
        let meta = toml::Table::try_from(meta).map_err(|e| Error::Artifact(format!("cannot encode metadata: {e}")))?;
        Ok(Self {
            kind,
            meta,
            arrays: Vec::new(),
        })
    }

    fn push(&mut self, name: &str, data: Vec<f64>) {
        self.arrays.push((name.to_string(), data));
    }

    fn meta<M: DeserializeOwned>(&self) -> Result<M> {
        self.meta
            .clone()
            .try_into()
            .map_err(|e| Error::Artifact(format!("bad {} metadata: {e}", self.kind)))
    }

    fn take(&mut self, name: &str, len: usize) -> Result<Vec<f64>> {
        let pos = self
            .arrays
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Artifact(format!("missing array \"{name}\"")))?;
        let (_, data) = self.arrays.remove(pos);
        if data.len() != len {
            return Err(Error::Artifact(format!(
                "array \"{name}\" has {} values, expected {len}",
                data.len()
            )));
        }
        Ok(data)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn encode(raw: &Raw) -> Result<Vec<u8>> {
    let total: usize = raw.arrays.iter().map(|(_, a)| a.len()).sum();
    let mut payload = Vec::with_capacity(8 * total);
    for (_, a) in &raw.arrays {
        for v in a {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        version: VERSION,
        kind: raw.kind,
        payload_bytes: payload.len() as u64,
        sha256: hex(&Sha256::digest(&payload)),
        arrays: raw
            .arrays
            .iter()
            .map(|(name, a)| ArrayDecl {
                name: name.clone(),
                len: a.len() as u64,
            })
            .collect(),
        meta: raw.meta.clone(),
    };
    let text = toml::to_string(&header).map_err(|e| Error::Artifact(format!("cannot encode header: {e}")))?;
    let mut out = format!("{MAGIC} {}\n", text.len()).into_bytes();
    out.reserve(text.len() + payload.len());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

fn decode(bytes: &[u8], expected: ArtifactKind) -> Result<Raw> {
    let bad_magic = || Error::Artifact(format!("not an artifact file: expected magic \"{MAGIC}\""));
    let nl = bytes.iter().take(64).position(|&b| b == b'\n').ok_or_else(bad_magic)?;
    let first = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad_magic())?;
    let len_text = first
        .strip_prefix(MAGIC)
        .and_then(|s| s.strip_prefix(' '))
        .ok_or_else(bad_magic)?;
    let header_len: usize = len_text
        .parse()
        .map_err(|_| Error::Artifact(format!("bad header length \"{len_text}\"")))?;
    let body = &bytes[nl + 1..];
    if body.len() < header_len {
        return Err(Error::Artifact("file ends inside the header".into()));
    }
    let text = std::str::from_utf8(&body[..header_len]).map_err(|_| Error::Artifact("header is not UTF-8".into()))?;
    let header: Header = toml::from_str(text).map_err(|e| Error::Artifact(format!("bad header: {e}")))?;
    if header.version != VERSION {
        return Err(Error::Artifact(format!(
            "unsupported version {} (this build reads {VERSION})",
            header.version
        )));
    }
    if header.kind != expected {
        return Err(Error::Artifact(format!(
            "expected a {expected} artifact, found {}",
            header.kind
        )));
    }
    let payload = &body[header_len..];
    let declared: u64 = header.arrays.iter().map(|a| a.len * 8).sum();
    if declared != header.payload_bytes || payload.len() as u64 != header.payload_bytes {
        return Err(Error::Artifact(format!(
            "payload is {} bytes, header declares {} (arrays sum to {declared})",
            payload.len(),
            header.payload_bytes
        )));
    }
    if hex(&Sha256::digest(payload)) != header.sha256 {
        return Err(Error::Artifact("checksum mismatch: payload is corrupt".into()));
    }
    let mut arrays = Vec::with_capacity(header.arrays.len());
    let mut chunks = payload.chunks_exact(8);
    for decl in &header.arrays {
        let data = chunks
            .by_ref()
            .take(decl.len as usize)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        arrays.push((decl.name.clone(), data));
    }
    Ok(Raw {
        kind: header.kind,
        meta: header.meta,
        arrays,
    })
}

/// Writes `bytes` next to `path` and renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = PathBuf::from(path);
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    tmp.set_file_name(name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

fn save(path: &Path, raw: &Raw) -> Result<()> {
    write_atomic(path, &encode(raw)?)
}

fn load(path: &Path, kind: ArtifactKind) -> Result<Raw> {
    decode(&fs::read(path)?, kind)
}

/// Kind recorded in an artifact header.
pub fn peek_kind(path: &Path) -> Result<ArtifactKind> {
    let bytes = fs::read(path)?;
    for kind in [ArtifactKind::Model, ArtifactKind::Posterior, ArtifactKind::Prediction] {
        match decode(&bytes, kind) {
            Ok(_) => return Ok(kind),
            Err(Error::Artifact(msg)) if msg.starts_with("expected a") => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Artifact("unknown artifact kind".into()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelArtifact {
    pub model: Mlp,
    /// Training samples seen; with the L2 weight this fixes the prior
    /// precision.
    pub n_train: usize,
    pub train: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    layers: Vec<LayerSpec>,
    n_train: usize,
    train: Option<TrainConfig>,
}

pub fn save_model(path: &Path, art: &ModelArtifact) -> Result<()> {
    let meta = ModelMeta {
        layers: art.model.layers().to_vec(),
        n_train: art.n_train,
        train: art.train.clone(),
    };
    let mut raw = Raw::new(ArtifactKind::Model, &meta)?;
    raw.push("theta", art.model.theta().to_vec());
    save(path, &raw)
}

pub fn load_model(path: &Path) -> Result<ModelArtifact> {
    let mut raw = load(path, ArtifactKind::Model)?;
    let meta: ModelMeta = raw.meta()?;
    let n: usize = meta.layers.iter().map(LayerSpec::n_params).sum();
    let theta = raw.take("theta", n)?;
    Ok(ModelArtifact {
        model: Mlp::new(meta.layers, theta)?,
        n_train: meta.n_train,
        train: meta.train,
    })
}

#[derive(Serialize, Deserialize)]
struct PosteriorMeta {
    layers: usize,
    dim: usize,
    n_samples: usize,
    prior_precision: f64,
    tc: f64,
}

pub fn save_posterior(path: &Path, post: &PosteriorCovariance) -> Result<()> {
    let meta = PosteriorMeta {
        layers: post.layers(),
        dim: post.dim(),
        n_samples: post.n_samples(),
        prior_precision: post.prior_precision(),
        tc: post.tc(),
    };
    let mut raw = Raw::new(ArtifactKind::Posterior, &meta)?;
    raw.push("covariance", post.matrix().as_slice().to_vec());
    save(path, &raw)
}

pub fn load_posterior(path: &Path) -> Result<PosteriorCovariance> {
    let mut raw = load(path, ArtifactKind::Posterior)?;
    let meta: PosteriorMeta = raw.meta()?;
    let cov = raw.take("covariance", meta.dim * meta.dim)?;
    PosteriorCovariance::from_parts(
        DMatrix::from_vec(meta.dim, meta.dim, cov),
        meta.layers,
        meta.n_samples,
        meta.prior_precision,
        meta.tc,
    )
}

/// Per-input logit Gaussians and marginal PMF estimates. Entry `i` was
/// sampled with seed `derive_seed(seed, i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionArtifact {
    /// Free-form description, e.g. `marginalized` or `point`.
    pub method: String,
    pub tc: f64,
    pub temperature: f64,
    pub samples: usize,
    pub seed: u64,
    pub n_classes: usize,
    pub sources: Vec<String>,
    /// 0-based; stored 1-based.
    pub labels: Option<Vec<usize>>,
    pub logits: Vec<LogitGaussian>,
    pub estimates: Vec<PmfEstimate>,
}

#[derive(Serialize, Deserialize)]
struct PredictionMeta {
    method: String,
    tc: f64,
    temperature: f64,
    samples: usize,
    seed: u64,
    n_inputs: usize,
    n_classes: usize,
    sources: Vec<String>,
    labels: bool,
}

pub fn save_prediction(path: &Path, art: &PredictionArtifact) -> Result<()> {
    let n = art.logits.len();
    let m = art.n_classes;
    if art.estimates.len() != n || art.labels.as_ref().is_some_and(|l| l.len() != n) {
        return Err(Error::shape("prediction artifact has inconsistent entry counts"));
    }
    for (i, (lg, est)) in art.logits.iter().zip(&art.estimates).enumerate() {
        if lg.dim() != m || est.pmf.len() != m {
            return Err(Error::shape(format!("entry {} does not have {m} classes", i + 1)));
        }
        if est.samples != art.samples || est.seed != derive_seed(art.seed, i as u64) {
            return Err(Error::Artifact(format!(
                "entry {} was not sampled with the artifact seed",
                i + 1
            )));
        }
    }
    let meta = PredictionMeta {
        method: art.method.clone(),
        tc: art.tc,
        temperature: art.temperature,
        samples: art.samples,
        seed: art.seed,
        n_inputs: n,
        n_classes: m,
        sources: art.sources.clone(),
        labels: art.labels.is_some(),
    };
    let mut raw = Raw::new(ArtifactKind::Prediction, &meta)?;
    let flat = |f: &dyn Fn(usize) -> Vec<f64>| (0..n).flat_map(f).collect::<Vec<f64>>();
    raw.push("logit_mean", flat(&|i| art.logits[i].mean.as_slice().to_vec()));
    raw.push("logit_cov", flat(&|i| art.logits[i].cov.as_slice().to_vec()));
    raw.push("pmf", flat(&|i| art.estimates[i].pmf.probs().as_slice().to_vec()));
    raw.push("pmf_cov", flat(&|i| art.estimates[i].cov.as_slice().to_vec()));
    raw.push("log_pmf", flat(&|i| art.estimates[i].log_pmf.as_slice().to_vec()));
    if let Some(labels) = &art.labels {
        raw.push("labels", labels.iter().map(|&y| (y + 1) as f64).collect());
    }
    save(path, &raw)
}

pub fn load_prediction(path: &Path) -> Result<PredictionArtifact> {
    let mut raw = load(path, ArtifactKind::Prediction)?;
    let meta: PredictionMeta = raw.meta()?;
    let (n, m) = (meta.n_inputs, meta.n_classes);
    let means = raw.take("logit_mean", n * m)?;
    let covs = raw.take("logit_cov", n * m * m)?;
    let pmfs = raw.take("pmf", n * m)?;
    let pmf_covs = raw.take("pmf_cov", n * m * m)?;
    let log_pmfs = raw.take("log_pmf", n * m)?;
    let labels = if meta.labels {
        let raw_labels = raw.take("labels", n)?;
        let mut out = Vec::with_capacity(n);
        for (i, &y) in raw_labels.iter().enumerate() {
            if !(y >= 1.0 && y <= m as f64 && y.fract() == 0.0) {
                return Err(Error::Artifact(format!(
                    "label {y} of entry {} is not a class in 1..={m}",
                    i + 1
                )));
            }
            out.push(y as usize - 1);
        }
        Some(out)
    } else {
        None
    };
    let mut logits = Vec::with_capacity(n);
    let mut estimates = Vec::with_capacity(n);
    for i in 0..n {
        let vec = |a: &[f64]| DVector::from_column_slice(&a[i * m..(i + 1) * m]);
        let mat = |a: &[f64]| DMatrix::from_column_slice(m, m, &a[i * m * m..(i + 1) * m * m]);
        logits.push(LogitGaussian::new(vec(&means), mat(&covs))?);
        estimates.push(PmfEstimate {
            pmf: Pmf::new(vec(&pmfs))?,
            cov: mat(&pmf_covs),
            log_pmf: vec(&log_pmfs),
            samples: meta.samples,
            seed: derive_seed(meta.seed, i as u64),
        });
    }
    Ok(PredictionArtifact {
        method: meta.method,
        tc: meta.tc,
        temperature: meta.temperature,
        samples: meta.samples,
        seed: meta.seed,
        n_classes: m,
        sources: meta.sources,
        labels,
        logits,
        estimates,
    })
}
