//! Run configuration: one TOML file with a table per pipeline stage, dotted
//! `section.key=value` overrides, and the resolved config written back out.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{SplitMode, SyntheticConfig, DEFAULT_MAX_LEN_SHORT};
use crate::dense::DenseConfig;
use crate::denoiser::{DenoiserConfig, NormPlacement};
use crate::evaluation::Target;
use crate::inference::{BeamConfig, Strategy};
use crate::train::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub split: SplitMode,
    /// k of the k-core filter; 0 or 1 disables filtering.
    pub min_interactions: usize,
    /// Most recent items kept per user.
    pub max_len: usize,
    /// Generator settings for `synth`.
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            split: SplitMode::LeaveOneOut,
            min_interactions: 5,
            max_len: DEFAULT_MAX_LEN_SHORT,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    /// Semantic layers; one dedup slot is always appended.
    pub m: usize,
    pub c: usize,
    pub iters: usize,
    pub randomize: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            m: 4,
            c: 256,
            iters: 100,
            randomize: false,
        }
    }
}

/// Architecture fields of the denoiser; vocabulary sizes come from the
/// catalog at train time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub max_positions: usize,
    pub slot_embeddings: bool,
    pub norm: NormPlacement,
    pub dropout: f64,
    pub rope_base: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = DenoiserConfig::desk();
        Self {
            layers: d.layers,
            embed_dim: d.embed_dim,
            heads: d.heads,
            mlp_hidden: d.mlp_hidden,
            max_positions: d.max_positions,
            slot_embeddings: d.slot_embeddings,
            norm: d.norm,
            dropout: d.dropout,
            rope_base: d.rope_base,
            init_std: d.init_std,
        }
    }
}

impl ModelConfig {
    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            layers: self.layers,
            embed_dim: self.embed_dim,
            heads: self.heads,
            mlp_hidden: self.mlp_hidden,
            max_positions: self.max_positions,
            slot_embeddings: self.slot_embeddings,
            norm: self.norm,
            dropout: self.dropout,
            rope_base: self.rope_base,
            init_std: self.init_std,
            ..DenoiserConfig::desk()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub beam_width: usize,
    pub strategy: Strategy,
    /// Function evaluations per item; unset fills one slot per step.
    pub nfe: Option<usize>,
    pub restrict: bool,
    pub widen_on_short: bool,
    /// Items predicted per context by `infer`.
    pub k_items: usize,
    pub top_k: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            beam_width: 20,
            strategy: Strategy::Greedy,
            nfe: None,
            restrict: true,
            widen_on_short: true,
            k_items: 1,
            top_k: 10,
        }
    }
}

impl InferConfig {
    pub fn beam(&self, seed: u64) -> BeamConfig {
        BeamConfig {
            width: self.beam_width,
            top_k: self.top_k,
            strategy: self.strategy,
            nfe: self.nfe,
            counts: None,
            restrict: self.restrict,
            seed,
            widen_on_short: self.widen_on_short,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DenseMode {
    /// Generative beam ranking only.
    #[default]
    Off,
    /// Beam candidates re-ranked by the dense head.
    Unified,
}

impl std::str::FromStr for DenseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" | "none" => Ok(DenseMode::Off),
            "unified" => Ok(DenseMode::Unified),
            other => Err(Error::Config(format!("unknown dense mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub target: Target,
    pub max_users: Option<usize>,
    /// Strategies swept; empty uses `infer.strategy`.
    pub strategies: Vec<Strategy>,
    /// NFE budgets swept; empty uses `infer.nfe`.
    pub nfes: Vec<usize>,
    pub dense_mode: DenseMode,
    pub per_user_csv: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![5, 10],
            target: Target::Test,
            max_users: None,
            strategies: Vec::new(),
            nfes: Vec::new(),
            dense_mode: DenseMode::Off,
            per_user_csv: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub tokenizer: TokenizerConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub dense: DenseConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parses `text` after applying `overrides` (`section.key=value`, value
    /// in TOML syntax or a bare string).
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokenizer.m == 0 || self.tokenizer.c == 0 {
            return Err(Error::Config("tokenizer.m and tokenizer.c must be positive".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("eval.ks must list positive cutoffs".into()));
        }
        if self.infer.beam_width == 0 || self.infer.k_items == 0 {
            return Err(Error::Config("infer.beam_width and infer.k_items must be positive".into()));
        }
        if self.dense.enabled {
            self.dense.validate(self.model.layers)?;
        }
        let mut d = self.model.denoiser();
        d.vocab_size = 2;
        d.output_vocab = 1;
        d.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, sections) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for s in sections {
        let entry = cur
            .entry(s.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {s} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// SHA-256 of each input file plus a combined digest over (name, digest)
/// pairs in the given order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputHashes {
    pub files: Vec<(String, String)>,
    pub combined: String,
}

pub fn hash_inputs(paths: &[&Path]) -> Result<InputHashes> {
    let mut files = Vec::with_capacity(paths.len());
    let mut all = Sha256::new();
    for p in paths {
        let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
        let h = hex(&Sha256::digest(&bytes));
        let name = p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
        all.update(name.as_bytes());
        all.update([0]);
        all.update(h.as_bytes());
        files.push((p.display().to_string(), h));
    }
    Ok(InputHashes {
        files,
        combined: hex(&all.finalize()),
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[train]\nstep = 3\n", &[]).is_err());
        assert!(RunConfig::from_toml("bogus = 1\n", &[]).is_err());
        assert!(RunConfig::from_toml("", &["model.width=3".into()]).is_err());
    }

    #[test]
    fn overrides_beat_file_values() {
        let cfg = RunConfig::from_toml(
            "seed = 4\n[train]\nsteps = 10\n",
            &["train.steps=20".into(), "infer.strategy=left_to_right".into(), "eval.nfes=[2,3]".into()],
        )
        .unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.train.steps, 20);
        assert_eq!(cfg.infer.strategy, Strategy::LeftToRight);
        assert_eq!(cfg.eval.nfes, vec![2, 3]);
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.infer.nfe = Some(3);
        cfg.data.split = SplitMode::LeaveTwoOut;
        assert_eq!(RunConfig::from_toml(&cfg.to_toml(), &[]).unwrap(), cfg);
    }

    #[test]
    fn invalid_model_rejected() {
        assert!(RunConfig::from_toml("[model]\nembed_dim = 10\nheads = 4\n", &[]).is_err());
    }

    #[test]
    fn input_hash_tracks_content() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.txt");
        fs::write(&a, b"abc").unwrap();
        let h1 = hash_inputs(&[&a]).unwrap();
        assert_eq!(h1.files[0].1, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        fs::write(&a, b"abd").unwrap();
        assert_ne!(hash_inputs(&[&a]).unwrap().combined, h1.combined);
    }
}
