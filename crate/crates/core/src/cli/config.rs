use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::CorpusStats;
use crate::corpus::GeneratorConfig;
use crate::error::{KalaError, Result};
use crate::trainer::{ModelConfig, TrainConfig, Variant};

pub const OUTPUT_DIR_ENV: &str = "KALA_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { corpus_dir: "corpus".into(), output_dir: "runs".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Keep only entities mentioned more than this many times in training.
    pub min_entity_frequency: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Variants trained by `train --matrix`.
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { variants: Variant::ALL.to_vec(), seeds: vec![0, 1, 2] }
    }
}

/// One configuration file for every command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    /// Corpus statistics for `flops`; measured from the corpus when absent.
    #[serde(default)]
    pub flops: Option<CorpusStats>,
}

/// Parse `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(value.to_string())),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

/// Apply `a.b.c=value` to a TOML table, creating intermediate tables.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| KalaError::Config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(KalaError::Config(format!("bad override key {key:?}")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| KalaError::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| KalaError::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e| KalaError::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config file, apply overrides, then the output-directory environment override.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| KalaError::io(format!("reading {}", path.display()), e))?;
        let mut cfg = Self::from_toml(&text, overrides)?;
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            cfg.paths.output_dir = dir.into();
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.train.validate()?;
        let mut t = self.model.transformer.clone();
        t.vocab_size = t.vocab_size.max(1);
        t.validate()?;
        if self.experiment.variants.is_empty() || self.experiment.seeds.is_empty() {
            return Err(KalaError::Config("experiment needs at least one variant and one seed".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| KalaError::Config(e.to_string()))
    }
}
