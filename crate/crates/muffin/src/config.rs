//! Run configuration: one TOML file with `[data]`, `[model]`, `[train]`,
//! `[eval]` and `[run]` sections. Unknown keys are rejected and the
//! effective configuration, defaults included, is echoed next to the
//! outputs.

use std::fs;
use std::path::{Path, PathBuf};

use muffin_core::data::SynthSpec;
use muffin_core::model::ModelConfig;
use muffin_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

/// Dropout used when `[model] dropout` is not given, by corpus density.
pub const SPARSE_DROPOUT: f64 = 0.4;
pub const DENSE_DROPOUT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Interaction TSV or preprocessed cache.
    pub input: Option<PathBuf>,
    /// Generate a synthetic corpus instead of reading `input`.
    pub synth: Option<SynthSpec>,
    pub min_core: usize,
    /// Dense corpora (MovieLens-like) default to the lower dropout.
    pub dense: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { input: None, synth: None, min_core: 5, dense: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    /// Worker threads for evaluation; 0 uses every available core.
    pub threads: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { ks: vec![5, 10, 20], threads: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub output: PathBuf,
    /// Seeds for multi-seed commands; empty means `[train] seed` alone.
    pub seeds: Vec<u64>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { output: PathBuf::from("runs/muffin"), seeds: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub run: RunSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSection::default(),
            model: ModelConfig { dropout: SPARSE_DROPOUT, ..ModelConfig::default() },
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            run: RunSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let dense = match table.get("data").and_then(|d| d.get("dense")) {
            Some(toml::Value::Boolean(b)) => *b,
            Some(other) => bail!(Config, "data.dense must be a boolean, got {other}"),
            None => false,
        };
        let model = table.entry("model").or_insert_with(|| toml::Value::Table(toml::Table::new()));
        if let toml::Value::Table(m) = model {
            let dropout = if dense { DENSE_DROPOUT } else { SPARSE_DROPOUT };
            m.entry("dropout").or_insert(toml::Value::Float(dropout));
        }
        toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Every problem with the configuration, so that all of them can be
    /// reported before any work starts.
    pub fn problems(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        match (&self.data.input, &self.data.synth) {
            (None, None) => out.push("data: set either input or synth".into()),
            (Some(_), Some(_)) => out.push("data: input and synth are mutually exclusive".into()),
            (None, Some(spec)) => {
                if let Err(e) = spec.validate() {
                    out.push(format!("data.synth: {}", e.message()));
                }
            }
            _ => {}
        }
        out.extend(self.model.problems().into_iter().map(|p| format!("model: {p}")));
        out.extend(self.train.problems().into_iter().map(|p| format!("train: {p}")));
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            out.push("eval: ks must be a non-empty list of positive cutoffs".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if !p.is_empty() {
            bail!(Config, "invalid configuration:\n  - {}", p.join("\n  - "));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.run.seeds.is_empty() {
            vec![self.train.seed]
        } else {
            self.run.seeds.clone()
        }
    }

    /// Writes the effective configuration to `dir/config.toml`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.toml");
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }
}

/// Reads a synthetic corpus spec (`key = value` lines).
pub fn load_synth_spec(path: &Path) -> Result<SynthSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: SynthSpec = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
    spec.validate()?;
    Ok(spec)
}
