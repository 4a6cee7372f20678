//! Run configuration: one JSON document holding every knob a command reads.

use std::path::{Path, PathBuf};

use elip_core::curation::SynthSpec;
use elip_core::encoders::DimsConfig;
use elip_core::io::read_json;
use elip_core::mapper::MapperConfig;
use elip_core::retrieval::{AttentionMode, CurveKind, DESK_K};
use elip_core::trainer::TrainConfig;
use elip_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "ELIP_SEED";
pub const RESOLVED_CONFIG: &str = "resolved-config.json";

/// Input artifacts. Relative paths resolve against the working directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gallery: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rankings: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokenizer: Option<PathBuf>,
}

impl Paths {
    /// The path named `flag`, or a config error telling how to supply it.
    pub fn require(&self, flag: &str) -> Result<&Path> {
        let p = match flag {
            "dataset" => &self.dataset,
            "benchmark" => &self.benchmark,
            "model" => &self.model,
            "gallery" => &self.gallery,
            "plan" => &self.plan,
            "rankings" => &self.rankings,
            "tokenizer" => &self.tokenizer,
            _ => unreachable!("unknown path slot {flag}"),
        };
        p.as_deref()
            .ok_or_else(|| Error::config(format!("missing --{flag} (or paths.{flag} in the config)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dims: DimsConfig,
    pub mapper: MapperConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    /// Mined batch size.
    pub batch_size: usize,
    pub unique_category: bool,
    /// Fraction kept by `curate-select`.
    pub select_fraction: f64,
    pub rerank_k: usize,
    pub itm_sigmoid: bool,
    /// Recall cut-offs reported by `eval`.
    pub ks: Vec<usize>,
    pub curve_kind: CurveKind,
    /// Sweep for recall top-k curves.
    pub curve_ks: Vec<usize>,
    pub attn_mode: AttentionMode,
    pub paths: Paths,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            dims: DimsConfig::default(),
            mapper: MapperConfig::default(),
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
            batch_size: 40,
            unique_category: false,
            select_fraction: 0.1,
            rerank_k: DESK_K,
            itm_sigmoid: false,
            ks: vec![1, 5, 10],
            curve_kind: CurveKind::RecallTopk,
            curve_ks: vec![1, 2, 5, 10, 20, 50, 100],
            attn_mode: AttentionMode::Cls,
            paths: Paths::default(),
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Reads `path`, or the defaults without one. Unreadable or malformed
    /// files are config errors.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => read_json(p).map_err(|e| Error::config(e.to_string())),
            None => Ok(Self::default()),
        }
    }

    /// Seed used for training: the training override or the run seed.
    pub fn train_seed(&self) -> u64 {
        self.train.seed.unwrap_or(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.mapper.validate()?;
        self.train.validate()?;
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        if !(self.select_fraction > 0.0 && self.select_fraction <= 1.0) {
            return Err(Error::config("select_fraction must be in (0, 1]"));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::config("ks must be a non-empty list of positive cut-offs"));
        }
        Ok(())
    }
}

/// Seed from `ELIP_SEED`, if set.
pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::config(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::config(format!("{SEED_ENV}: {e}"))),
    }
}
