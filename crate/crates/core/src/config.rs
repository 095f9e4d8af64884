//! Run configuration: a TOML file with one table per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::asr::ProbeConfig;
use crate::error::{Error, Result};
use crate::network::SeNetConfig;
use crate::rng::{tag_of, SplitMix64};
use crate::trainer::{FinetuneConfig, PretrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub n_train_speakers: usize,
    pub n_eval_speakers: usize,
    /// Training keywords; all keywords when absent.
    pub n_keywords: Option<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { n_train_speakers: 24, n_eval_speakers: 10, n_keywords: Some(2) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentConfig {
    /// Cut one random segment of `[min_sec, max_sec]` from each utterance
    /// before fitting it to the network input length.
    pub random: bool,
    pub min_sec: f64,
    pub max_sec: f64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig { random: false, min_sec: 1.5, max_sec: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Enrollment utterances per speaker.
    pub m: usize,
    pub probe: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { m: 5, probe: ProbeConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    pub network: SeNetConfig,
    pub segment: SegmentConfig,
    pub split: SplitConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = RunConfig {
            seed: 0,
            network: SeNetConfig::default(),
            segment: SegmentConfig::default(),
            split: SplitConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
        };
        c.derive_seeds();
        c
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.derive_seeds();
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serialisable")
    }

    /// Set the master seed and re-derive the stage seeds.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.derive_seeds();
    }

    fn derive_seeds(&mut self) {
        let s = |tag: &str| SplitMix64::derive(self.seed, tag_of(tag)).next_u64();
        let (p, f, e) = (s("pretrain"), s("finetune"), s("probe"));
        self.pretrain.seed = p;
        self.finetune.seed = f;
        self.eval.probe.seed = e;
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.eval.m == 0 {
            return Err(Error::Config("eval.m must be >= 1".into()));
        }
        if self.segment.random && !(self.segment.min_sec > 0.0 && self.segment.max_sec >= self.segment.min_sec) {
            return Err(Error::Config("segment range must satisfy 0 < min_sec <= max_sec".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of the configuration.
    pub fn hash(&self) -> String {
        hash_bytes(&serde_json::to_vec(self).expect("config is serialisable"))
    }
}

/// Lower-case hex SHA-256.
pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
