//! Pipeline configuration file (TOML). Every field has a default, so an
//! empty file or no file at all is a valid configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use adrcm_core::adrcm::Hyperparams;
use adrcm_core::inference::RagMode;
use adrcm_core::iors::{DEFAULT_BETA, DEFAULT_MAX_SUMMARY_CHARS};
use adrcm_core::kb::ChunkParams;
use adrcm_core::llm::DEFAULT_MAX_IN_FLIGHT;
use adrcm_core::RelationSchema;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub cache_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub iors: IorsSection,
    pub adrcm: AdrcmSection,
    pub index: IndexSection,
    pub backend: BackendSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// `cdr`, `gda` or `biored`.
    pub preset: String,
    /// Custom schema JSON; overrides the preset's schema.
    pub schema_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IorsSection {
    pub beta: u32,
    pub summary_template: Option<PathBuf>,
    pub confirmation_template: Option<PathBuf>,
    pub include_gold_relation: bool,
    pub max_summary_chars: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdrcmSection {
    pub negative_ratio: f64,
    /// Hyperparameter preset; defaults to the dataset preset.
    pub hyperparams: Option<String>,
    pub base_model_id: Option<String>,
    /// Instruction template shared by export and inference.
    pub instruction: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexSection {
    pub chunk_size: usize,
    pub chunk_overlap: usize,
    pub k: usize,
    pub per_entity_quota: Option<usize>,
    pub rag: RagMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub chat_url: Option<String>,
    pub chat_model: String,
    /// Model id of the fine-tuned model used at inference.
    pub infer_model: Option<String>,
    pub embed_url: Option<String>,
    pub embed_model: String,
    /// Keyed reply script; replaces the chat endpoint when set.
    pub mock_script: Option<PathBuf>,
    pub max_in_flight: usize,
    pub max_retries: u32,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { preset: "cdr".into(), schema_file: None }
    }
}

impl Default for IorsSection {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            summary_template: None,
            confirmation_template: None,
            include_gold_relation: false,
            max_summary_chars: DEFAULT_MAX_SUMMARY_CHARS,
        }
    }
}

impl Default for AdrcmSection {
    fn default() -> Self {
        Self { negative_ratio: 1.0, hyperparams: None, base_model_id: None, instruction: None }
    }
}

impl Default for IndexSection {
    fn default() -> Self {
        let c = ChunkParams::default();
        Self { chunk_size: c.size, chunk_overlap: c.overlap, k: 4, per_entity_quota: None, rag: RagMode::Cui }
    }
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            chat_url: None,
            chat_model: adrcm_core::llm::ChatParams::default().model_id,
            infer_model: None,
            embed_url: None,
            embed_model: "text-embedding-3-small".into(),
            mock_script: None,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            max_retries: 4,
        }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("invalid configuration")?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Reads `path`, resolving relative paths inside it against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(inner) = p {
                if inner.is_relative() {
                    *inner = base.join(&*inner);
                }
            }
        };
        fix(&mut cfg.cache_dir);
        fix(&mut cfg.dataset.schema_file);
        fix(&mut cfg.iors.summary_template);
        fix(&mut cfg.iors.confirmation_template);
        fix(&mut cfg.adrcm.instruction);
        fix(&mut cfg.backend.mock_script);
        cfg.check_files()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        if self.iors.beta == 0 {
            bail!("iors.beta must be at least 1");
        }
        if self.index.chunk_overlap >= self.index.chunk_size {
            bail!("index.chunk_overlap must be smaller than index.chunk_size");
        }
        if self.index.k == 0 {
            bail!("index.k must be at least 1");
        }
        if !self.adrcm.negative_ratio.is_finite() || self.adrcm.negative_ratio < 0.0 {
            bail!("adrcm.negative_ratio must be a non-negative number");
        }
        Ok(())
    }

    pub fn check_files(&self) -> Result<()> {
        let files = [
            &self.dataset.schema_file,
            &self.iors.summary_template,
            &self.iors.confirmation_template,
            &self.adrcm.instruction,
            &self.backend.mock_script,
        ];
        for p in files.into_iter().flatten() {
            if !p.is_file() {
                bail!("referenced file {} does not exist", p.display());
            }
        }
        Ok(())
    }

    pub fn schema(&self) -> Result<RelationSchema> {
        match &self.dataset.schema_file {
            Some(p) => {
                let text = read(p)?;
                Ok(RelationSchema::from_json(&text)?)
            }
            None => Ok(RelationSchema::preset(&self.dataset.preset)?),
        }
    }

    pub fn hyperparams(&self) -> Result<Hyperparams> {
        let name = self.adrcm.hyperparams.as_deref().unwrap_or(&self.dataset.preset);
        let mut h = Hyperparams::preset(name)?;
        if let Some(id) = &self.adrcm.base_model_id {
            h.base_model_id = id.clone();
        }
        Ok(h)
    }

    pub fn chunk_params(&self) -> ChunkParams {
        ChunkParams { size: self.index.chunk_size, overlap: self.index.chunk_overlap }
    }
}

pub fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(PipelineConfig::parse("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn sections_override_defaults() {
        let cfg = PipelineConfig::parse(
            "seed = 9\n[dataset]\npreset = \"gda\"\n[index]\nrag = \"off\"\nk = 2\n[iors]\nbeta = 5\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.index.rag, RagMode::Off);
        assert_eq!(cfg.iors.beta, 5);
        assert_eq!(cfg.schema().unwrap().name(), "GDA");
        let h = cfg.hyperparams().unwrap();
        assert_eq!((h.lora_rank, h.lora_alpha), (64, 16));
    }

    #[test]
    fn rejects_bad_values() {
        assert!(PipelineConfig::parse("[iors]\nbeta = 0\n").is_err());
        assert!(PipelineConfig::parse("[index]\nchunk_size = 8\nchunk_overlap = 8\n").is_err());
        assert!(PipelineConfig::parse("unknown_key = 1\n").is_err());
    }

    #[test]
    fn missing_referenced_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[backend]\nmock_script = \"nope.json\"\n").unwrap();
        let err = PipelineConfig::load(&p).unwrap_err().to_string();
        assert!(err.contains("nope.json"), "{err}");
    }
}
