//! Versioned, checksummed model files.
//!
//! Layout: magic `TPDM`, u32 version, u64 payload length, the JSON payload,
//! then the SHA-256 of the payload. Floats are written with round-trip
//! precision so a loaded model scores bitwise like the saved one.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{KlMatchingModel, TiedMahalanobisModel};
use crate::ensemble::{EnsembleConfig, TapuddModel, SEESAW_RULE};
use crate::error::{Error, Result};
use crate::gmm::{FitConfig, RNG_NAME};
use crate::io::{encode_binary, write_atomic, FileKind};
use crate::scorer::Scorer;
use crate::stats::FeatureMatrix;
use crate::tapmb::TapMahalanobisModel;
use crate::tapmos::{TapMosModel, TrainConfig};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"TPDM";
pub const ARCHIVE_VERSION: u32 = 1;
const PREFIX_LEN: usize = 4 + 4 + 8;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Tapmb,
    Tapudd,
    Tapmos,
    TiedMb,
    KlRefs,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Tapmb => "tapmb",
            ModelKind::Tapudd => "tapudd",
            ModelKind::Tapmos => "tapmos",
            ModelKind::TiedMb => "tied_mb",
            ModelKind::KlRefs => "kl_refs",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Tapmb(TapMahalanobisModel),
    Tapudd(TapuddModel),
    Tapmos(TapMosModel),
    TiedMb(TiedMahalanobisModel),
    KlRefs(KlMatchingModel),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Tapmb(_) => ModelKind::Tapmb,
            Model::Tapudd(_) => ModelKind::Tapudd,
            Model::Tapmos(_) => ModelKind::Tapmos,
            Model::TiedMb(_) => ModelKind::TiedMb,
            Model::KlRefs(_) => ModelKind::KlRefs,
        }
    }

    fn scorer(&self) -> &dyn Scorer {
        match self {
            Model::Tapmb(m) => m,
            Model::Tapudd(m) => m,
            Model::Tapmos(m) => m,
            Model::TiedMb(m) => m,
            Model::KlRefs(m) => m,
        }
    }

    /// Covariances that needed eigenvalue clipping, as (K, cluster) pairs.
    fn psd_repairs(&self) -> Vec<PsdRepair> {
        let from = |m: &TapMahalanobisModel| {
            m.fit_meta()
                .map(|meta| {
                    meta.repaired_clusters
                        .iter()
                        .map(|&cluster| PsdRepair { k: m.k(), cluster })
                        .collect::<Vec<_>>()
                })
                .unwrap_or_default()
        };
        match self {
            Model::Tapmb(m) => from(m),
            Model::Tapudd(m) => m.members().iter().flat_map(from).collect(),
            _ => Vec::new(),
        }
    }
}

impl Scorer for Model {
    fn dim(&self) -> usize {
        self.scorer().dim()
    }

    fn score(&self, x: &[f64]) -> Result<f64> {
        self.scorer().score(x)
    }

    fn score_batch(&self, features: &FeatureMatrix) -> Result<Vec<f64>> {
        self.scorer().score_batch(features)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsdRepair {
    pub k: usize,
    pub cluster: usize,
}

/// What is needed to refit the model from its training features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub fit_config: Option<FitConfig>,
    pub ensemble_config: Option<EnsembleConfig>,
    pub train_config: Option<TrainConfig>,
    pub reg: Option<f64>,
    /// SHA-256 of the training matrix in binary encoding.
    pub features_sha256: Option<String>,
    pub psd_repairs: Vec<PsdRepair>,
    pub rng: String,
    pub seesaw_rule: String,
    pub tool_version: String,
}

impl Provenance {
    pub fn new(seed: Option<u64>) -> Self {
        Self {
            seed,
            fit_config: None,
            ensemble_config: None,
            train_config: None,
            reg: None,
            features_sha256: None,
            psd_repairs: Vec::new(),
            rng: RNG_NAME.to_string(),
            seesaw_rule: SEESAW_RULE.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn with_fit_config(mut self, c: FitConfig) -> Self {
        self.fit_config = Some(c);
        self
    }

    pub fn with_ensemble_config(mut self, c: EnsembleConfig) -> Self {
        self.ensemble_config = Some(c);
        self
    }

    pub fn with_train_config(mut self, c: TrainConfig) -> Self {
        self.train_config = Some(c);
        self
    }

    pub fn with_reg(mut self, reg: f64) -> Self {
        self.reg = Some(reg);
        self
    }

    pub fn with_features(mut self, features: &FeatureMatrix) -> Self {
        self.features_sha256 = Some(features_digest(features));
        self
    }
}

pub fn features_digest(features: &FeatureMatrix) -> String {
    hex(&Sha256::digest(encode_binary(features, FileKind::Features)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelArchive {
    pub format_version: u32,
    pub model_kind: ModelKind,
    pub dim: usize,
    pub payload: Model,
    pub provenance: Provenance,
}

impl ModelArchive {
    /// Fills in kind, dimension and covariance-repair records from the model.
    pub fn new(model: Model, mut provenance: Provenance) -> Self {
        provenance.psd_repairs = model.psd_repairs();
        Self {
            format_version: ARCHIVE_VERSION,
            model_kind: model.kind(),
            dim: model.dim(),
            payload: model,
            provenance,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(self)
            .map_err(|e| Error::NumericalFailure(format!("archive serialization: {e}")))?;
        let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + DIGEST_LEN);
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&Sha256::digest(&json));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Integrity("file too short for an archive header".into()));
        }
        if &bytes[..4] != ARCHIVE_MAGIC {
            return Err(Error::Integrity("not a model archive (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version > ARCHIVE_VERSION {
            return Err(Error::Version {
                found: version,
                supported: ARCHIVE_VERSION,
            });
        }
        if version == 0 {
            return Err(Error::Integrity("archive version 0 is invalid".into()));
        }
        if bytes.len() < PREFIX_LEN {
            return Err(Error::Integrity("truncated archive header".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let expected = (PREFIX_LEN + DIGEST_LEN) as u64 + len;
        if bytes.len() as u64 != expected {
            return Err(Error::Integrity(format!(
                "archive is {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let json = &bytes[PREFIX_LEN..PREFIX_LEN + len as usize];
        if Sha256::digest(json).as_slice() != &bytes[PREFIX_LEN + len as usize..] {
            return Err(Error::Integrity("payload checksum mismatch".into()));
        }
        let archive: ModelArchive =
            serde_json::from_slice(json).map_err(|e| Error::parse("archive payload", e.to_string()))?;
        archive.check()?;
        Ok(archive)
    }

    fn check(&self) -> Result<()> {
        if self.format_version != ARCHIVE_VERSION {
            return Err(Error::Integrity(format!(
                "payload claims version {}, header {ARCHIVE_VERSION}",
                self.format_version
            )));
        }
        if self.model_kind != self.payload.kind() || self.dim != self.payload.dim() {
            return Err(Error::Integrity("archive header disagrees with its payload".into()));
        }
        if let Model::Tapudd(m) = &self.payload {
            m.config().validate()?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn model(&self) -> &Model {
        &self.payload
    }
}

impl Scorer for ModelArchive {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, x: &[f64]) -> Result<f64> {
        self.payload.score(x)
    }

    fn score_batch(&self, features: &FeatureMatrix) -> Result<Vec<f64>> {
        self.payload.score_batch(features)
    }
}

pub fn save_model(archive: &ModelArchive, path: &Path) -> Result<()> {
    archive.save(path)
}

pub fn load_model(path: &Path) -> Result<ModelArchive> {
    ModelArchive::load(path)
}
