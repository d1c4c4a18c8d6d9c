//! Run configuration: a TOML document with `--set section.key=value`
//! overrides applied before typed validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tgr_core::datasets::SyntheticConfig;
use tgr_core::evaluation::{AgConfig, EvalConfig};
use tgr_core::grouping::HeadFit;
use tgr_core::inversion::InversionConfig;
use tgr_core::meta::TrainConfig;
use tgr_core::zoo::{ArchPolicy, PretrainHyper};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub zoo: ZooSection,
    #[serde(default)]
    pub inversion: InversionSection,
    #[serde(default)]
    pub grouping: GroupingSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub ag: AgSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    #[serde(flatten)]
    pub synthetic: SyntheticConfig,
    /// Directory with one subdirectory per class; replaces the synthetic
    /// benchmark when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub folder: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_file: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZooSection {
    pub n: usize,
    pub way: usize,
    pub arch: ArchPolicy,
    pub pretrain: PretrainHyper,
}

impl Default for ZooSection {
    fn default() -> Self {
        ZooSection {
            n: 12,
            way: 5,
            arch: ArchPolicy::default(),
            pretrain: PretrainHyper::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskSourceKind {
    /// Recovered once by `invert`, replayed during training.
    Cache,
    /// Recovered afresh at every training iteration.
    Live,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionSection {
    #[serde(flatten)]
    pub recovery: InversionConfig,
    /// Tasks recovered per teacher by `invert`.
    pub variants: usize,
    pub source: TaskSourceKind,
}

impl Default for InversionSection {
    fn default() -> Self {
        InversionSection {
            recovery: InversionConfig::default(),
            variants: 2,
            source: TaskSourceKind::Cache,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupStrategy {
    /// Mutually dissimilar teachers share a group.
    Dissimilar,
    /// Mutually similar teachers share a group.
    Similar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupingSection {
    pub c: usize,
    pub strategy: GroupStrategy,
    /// Record directory of a pre-trained probe; built from a held-out
    /// synthetic domain when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe: Option<PathBuf>,
    pub probe_classes: usize,
    pub probe_pretrain: PretrainHyper,
    pub head: HeadFit,
    /// Images per teacher for the CKA heatmap.
    pub cka_samples: usize,
}

impl Default for GroupingSection {
    fn default() -> Self {
        GroupingSection {
            c: 3,
            strategy: GroupStrategy::Dissimilar,
            probe: None,
            probe_classes: 12,
            probe_pretrain: PretrainHyper::default(),
            head: HeadFit::default(),
            cka_samples: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    #[serde(flatten)]
    pub meta: TrainConfig,
    /// Checkpoint interval in epochs; 0 keeps only the final model.
    pub checkpoint_every: usize,
    /// Recovered-batch image dump interval in epochs; 0 disables it.
    pub dump_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            meta: TrainConfig::default(),
            checkpoint_every: 25,
            dump_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgSection {
    #[serde(flatten)]
    pub run: AgConfig,
    /// Pool position of the basic teacher.
    pub basic: usize,
    /// Classes each auxiliary teacher shares with the basic teacher.
    pub shared: Vec<usize>,
}

impl Default for AgSection {
    fn default() -> Self {
        AgSection {
            run: AgConfig::default(),
            basic: 0,
            shared: vec![0, 1, 2, 5, 0, 1, 2, 5, 0, 2, 5, 5, 0, 5, 5],
        }
    }
}

/// Parse `text`, apply `overrides` (`section.key=value`), then `seed`.
pub fn resolve(text: &str, overrides: &[String], seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut doc: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::Config(format!("config is not valid TOML: {e}")))?;
    for item in overrides {
        apply_override(&mut doc, item)?;
    }
    if let Some(s) = seed {
        doc.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    let config: RunConfig = toml::Value::Table(doc)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn load(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    resolve(&text, overrides, seed)
}

fn apply_override(doc: &mut toml::Table, item: &str) -> Result<(), CliError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{item}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key `{key}` has an empty segment")));
    }
    // bare words that are not TOML literals become strings
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let (last, parents) = path.split_last().expect("split yields at least one segment");
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.zoo.n == 0 || self.zoo.way == 0 {
            return bad("zoo.n and zoo.way must be at least 1".into());
        }
        if self.grouping.c == 0 || self.grouping.c > self.zoo.n {
            return bad(format!("grouping.c must lie in [1, {}]", self.zoo.n));
        }
        if self.inversion.variants == 0 {
            return bad("inversion.variants must be at least 1".into());
        }
        if self.eval.episodes == 0 {
            return bad("eval.episodes must be at least 1".into());
        }
        self.train.meta.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
        for (name, p) in [
            ("dataset.folder", &self.dataset.folder),
            ("dataset.split_file", &self.dataset.split_file),
            ("grouping.probe", &self.grouping.probe),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return bad(format!("{name} {} does not exist", p.display()));
                }
            }
        }
        if self.dataset.folder.is_some() != self.dataset.split_file.is_some() {
            return bad("dataset.folder and dataset.split_file must be given together".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
