//! Run configuration: one TOML document covering data generation, split,
//! batching, model, training and loss, with a single global seed.
//!
//! Precedence, lowest first: built-in defaults, the config file,
//! `key=value` overrides (dotted keys such as `train.learning_rate`), then
//! dedicated command-line flags applied by the caller.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{BatchSpec, GeneratorParams, SplitSpec};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::nets::ModelConfig;
use crate::trainer::{Setup, TrainConfig};

pub const ARCHIVE_FILE: &str = "config.archive";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Generator parameters; the seed comes from [`RunConfig::seed`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_identities: usize,
    pub samples_per_view: usize,
    pub latent_dim: usize,
    pub feature_dim: usize,
    pub view_shift_strength: f64,
    pub noise_sigma: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let g = GeneratorParams::default();
        Self {
            num_identities: g.num_identities,
            samples_per_view: g.samples_per_view,
            latent_dim: g.latent_dim,
            feature_dim: g.feature_dim,
            view_shift_strength: g.view_shift_strength,
            noise_sigma: g.noise_sigma,
        }
    }
}

/// Identity counts per partition; the seed comes from [`RunConfig::seed`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let s = SplitSpec::default();
        Self {
            train: s.train,
            valid: s.valid,
            test: s.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives every random stream: data, split, init, batching, gallery.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub batch: BatchSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            split: SplitConfig::default(),
            batch: BatchSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies `overrides`, and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Validation(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Validation(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Validation(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        // TOML integers are signed 64-bit
        if self.seed > i64::MAX as u64 {
            return Err(Error::Validation(format!("seed must be <= {}, got {}", i64::MAX, self.seed)));
        }
        self.generator().validate()?;
        let s = &self.split;
        if s.train == 0 || s.valid == 0 || s.test == 0 {
            return Err(Error::Validation("every split part needs at least one identity".into()));
        }
        if s.train + s.valid + s.test > self.data.num_identities {
            return Err(Error::Validation(format!(
                "split needs {} identities but data.num_identities is {}",
                s.train + s.valid + s.test,
                self.data.num_identities
            )));
        }
        if self.batch.identities > s.train {
            return Err(Error::Validation(format!(
                "batch.identities is {} but the training split has {} identities",
                self.batch.identities, s.train
            )));
        }
        if s.valid < 2 {
            return Err(Error::Validation("split.valid needs at least 2 identities".into()));
        }
        self.setup().validate()
    }

    pub fn generator(&self) -> GeneratorParams {
        let d = &self.data;
        GeneratorParams {
            num_identities: d.num_identities,
            samples_per_view: d.samples_per_view,
            latent_dim: d.latent_dim,
            feature_dim: d.feature_dim,
            view_shift_strength: d.view_shift_strength,
            noise_sigma: d.noise_sigma,
            seed: self.seed,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train: self.split.train,
            valid: self.split.valid,
            test: self.split.test,
            seed: self.seed,
        }
    }

    pub fn setup(&self) -> Setup {
        Setup {
            model: self.model.clone(),
            batch: self.batch.clone(),
            train: self.train.clone(),
            loss: self.loss.clone(),
            seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Validation(format!("config not serializable: {e}")))
    }

    /// Writes `config.archive` into `dir`. The file loads back with
    /// [`RunConfig::load`] to the same value.
    pub fn archive(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(ARCHIVE_FILE);
        let text = format!("# xview {VERSION}\n{}", self.to_toml()?);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// `a.b.c=value`. The value is read as a TOML literal when it parses as one
/// and as a bare string otherwise, so `train.similarity_objective=adaptive`
/// needs no quotes.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Validation(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Validation(format!("bad override key {key:?}")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let (last, path) = parts.split_last().expect("non-empty");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Validation(format!("override {key:?}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
