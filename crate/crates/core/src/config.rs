//! File-driven run configuration with `section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::error::{Result, TklError};
use crate::eval::MetricConfig;
use crate::model::ModelConfig;
use crate::synthetic::SyntheticConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(flatten)]
    pub metrics: MetricConfig,
    /// Rank cutoff of the length-bias retrieval probability.
    pub retrieval_depth: usize,
    /// Lower bounds of the length-bias bins.
    pub length_bins: Vec<usize>,
    /// Region starts after this token count as late.
    pub region_cutoff: usize,
    pub region_bins: Vec<usize>,
    /// Top regions reported per document.
    pub region_ranks: usize,
    /// Truncation lengths of the quality-versus-length table.
    pub max_doc_lens: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            metrics: MetricConfig::default(),
            retrieval_depth: 30,
            length_bins: vec![0, 250, 500, 1000, 1500, 2000, 3000, 4000],
            region_cutoff: 500,
            region_bins: vec![0, 100, 200, 300, 400, 500, 750, 1000, 1500, 2000, 3000],
            region_ranks: 3,
            max_doc_lens: vec![200, 2000, 4000],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    #[serde(flatten)]
    pub run: BenchConfig,
    /// Lengths of the closed-form cost table.
    pub cost_lengths: Vec<usize>,
    /// Documents sampled from the corpus for timing.
    pub sample_docs: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            run: BenchConfig::default(),
            cost_lengths: vec![200, 500, 1000, 2000, 4000],
            sample_docs: 64,
        }
    }
}

/// Input and output locations. Relative paths resolve against the working
/// directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Text-format embeddings; also defines the vocabulary.
    pub embeddings: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub triples: Option<PathBuf>,
    pub validation_run: Option<PathBuf>,
    pub validation_qrels: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Skip malformed input lines instead of failing.
    pub lenient: bool,
    /// Initialise salience with IDF over the corpus.
    pub idf_salience: bool,
    /// Threads used for re-ranking; results do not depend on it.
    pub workers: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchSection,
    pub synthetic: SyntheticConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            lenient: false,
            idf_salience: true,
            workers: 1,
            seed: 42,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchSection::default(),
            synthetic: SyntheticConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| TklError::Config(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(TklError::Config(format!("bad override key `{key}`")));
    }
    let mut current = table;
    for part in &parts[..parts.len() - 1] {
        let entry = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = entry
            .as_table_mut()
            .ok_or_else(|| TklError::Config(format!("`{part}` in `{key}` is not a section")))?;
    }
    current.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses TOML text, applies overrides and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| TklError::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| TklError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Loads `path` (or defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| TklError::io(p, e))?,
            None => String::new(),
        };
        RunConfig::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.workers == 0 {
            return Err(TklError::Config("workers must be at least 1".into()));
        }
        if self.eval.retrieval_depth == 0 || self.eval.region_ranks == 0 {
            return Err(TklError::Config("retrieval_depth and region_ranks must be positive".into()));
        }
        crate::eval::Bins::new(self.eval.length_bins.clone()).map_err(|e| TklError::Config(e.to_string()))?;
        crate::eval::Bins::new(self.eval.region_bins.clone()).map_err(|e| TklError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the fully resolved configuration to `dir/config.toml`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| TklError::io(dir, e))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| TklError::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let again = RunConfig::from_toml(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.model.window, 40);
        assert_eq!(cfg.model.overlap, 10);
        assert_eq!(cfg.model.region_size, 30);
        assert_eq!(cfg.model.top_regions, 3);
        assert_eq!(cfg.model.neighbors, 2);
        assert_eq!(cfg.model.kernels, 11);
        assert_eq!(cfg.train.batch_size, 32);
    }

    #[test]
    fn overrides_apply() {
        let text = "[model]\nlayers = 1\n";
        let sets = vec![
            "model.saturation=log".to_string(),
            "train.lr_other = 0.01".to_string(),
            "paths.corpus=data/c.tsv".to_string(),
            "eval.max_doc_lens=[100, 300]".to_string(),
            "workers=2".to_string(),
        ];
        let cfg = RunConfig::from_toml(text, &sets).unwrap();
        assert_eq!(cfg.model.layers, 1);
        assert_eq!(cfg.model.saturation, crate::scoring::SaturationMode::Log);
        assert_eq!(cfg.train.lr_other, 0.01);
        assert_eq!(cfg.paths.corpus.as_deref(), Some(Path::new("data/c.tsv")));
        assert_eq!(cfg.eval.max_doc_lens, [100, 300]);
        assert_eq!(cfg.workers, 2);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[model]\nwidnow = 3\n", &[]).is_err());
        assert!(RunConfig::from_toml("bogus = 1\n", &[]).is_err());
        assert!(RunConfig::from_toml("", &["model.nope=1".into()]).is_err());
        assert!(RunConfig::from_toml("", &["model.heads=7".into()]).is_err());
        assert!(RunConfig::from_toml("", &["novalue".into()]).is_err());
    }

    #[test]
    fn echo_reproduces() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::from_toml("", &["model.max_doc_len=4000".into()]).unwrap();
        let path = cfg.echo(dir.path()).unwrap();
        assert_eq!(RunConfig::load(Some(&path), &[]).unwrap(), cfg);
    }
}
