//! Declarative run configuration (TOML) covering every pipeline stage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align1::Stage1Config;
use crate::align2::Stage2Config;
use crate::datagen::GenConfig;
use crate::diffcore::optim::hex_digest;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::evalkit::EvalConfig;
use crate::ranker::RankerConfig;

pub const SEED_ENV: &str = "COLDPROXY_SEED";

/// All sections default individually, so a config file may list only the
/// fields it overrides.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub generation: GenConfig,
    pub encoder: EncoderConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub ranker: RankerConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Desk-scale defaults used by the examples and the acceptance suite.
    pub fn desk() -> Self {
        Self {
            seed: 1,
            stage1: Stage1Config::desk(),
            ..Self::default()
        }
    }

    /// 200 users / 100 items; completes end to end in well under a minute.
    pub fn tiny() -> Self {
        let mut cfg = Self::desk();
        cfg.generation = GenConfig::tiny();
        cfg.encoder.vocab_size = cfg.generation.vocab_size;
        cfg.encoder.n_layers = 4;
        cfg.encoder.d_hidden = 32;
        cfg.stage1.epochs = 3;
        cfg.stage1.batch_size = 32;
        cfg.ranker.epochs = 2;
        cfg.ranker.mlp_hidden = vec![32, 16];
        cfg
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Propagates the run seed into every section and keeps dependent
    /// dimensions consistent.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.generation.seed = seed;
        self.stage1.seed = seed;
        self.stage2.seed = seed;
        self.ranker.seed = seed;
        self
    }

    pub fn harmonized(mut self) -> Self {
        self.encoder.vocab_size = self.generation.vocab_size;
        self.encoder.n_patches = self.generation.n_patches;
        self.encoder.d_patch = self.generation.d_patch;
        self.encoder.d_id = self.generation.d_id;
        self.ranker.d = self.generation.d_id;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.generation.validate()?;
        self.encoder.validate()?;
        self.stage1.validate()?;
        self.ranker.validate()?;
        if self.encoder.vocab_size != self.generation.vocab_size {
            return Err(Error::config(
                "encoder.vocab_size",
                "must equal generation.vocab_size",
            ));
        }
        if self.encoder.d_id != self.ranker.d {
            return Err(Error::config("ranker.d", "must equal encoder.d_id"));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hash_json(self)
    }
}

/// First 16 hex digits of SHA-256 over the canonical JSON encoding.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    let mut h = Sha256::new();
    h.update(&bytes);
    hex_digest(&h.finalize())[..16].to_string()
}
