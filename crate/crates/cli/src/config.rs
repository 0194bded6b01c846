//! `entaudit.toml` loading.
//!
//! ```toml
//! [data]
//! taxonomy = "taxonomy.json"      # allowed metadata keys and values
//! entities = "entities.jsonl"
//! schemas = "schemas.jsonl"
//! templates = "templates.jsonl"
//! languages = ["en"]              # every entity needs a surface form in each
//!
//! [matrix]
//! tasks = []                      # empty runs every loaded schema
//! models = ["mock"]
//! languages = ["en"]
//! variants = ["ZS-Text", "FS-Text", "ZS-Num", "FS-Num"]
//!
//! [endpoint]
//! base_url = "http://127.0.0.1:8000/v1"
//! api_key = "..."                 # prefer ENTAUDIT_API_KEY
//! timeout_secs = 60
//!
//! [run]
//! store = "run/observations.log"
//! concurrency = 8
//! chunk_size = 256
//!
//! [mock]                          # bias profile for `--backend mock`
//! fidelity = 5.0
//! noise_scale = 0.0
//! failure_rate = 0.0
//! shifts = { e001 = 0.5 }
//!
//! [synth]
//! model = "generator"
//! vocabulary = "vocab.json"
//! examples = "examples.jsonl"
//! ```
//!
//! Relative paths resolve against the config file's directory.
//! `ENTAUDIT_BASE_URL` and `ENTAUDIT_API_KEY` override the endpoint section.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;

use entaudit_core::gateway::BiasProfile;
use entaudit_core::registry::{self, EntityRegistry, SchemaSet, Taxonomy};
use entaudit_core::runner::{AuditData, ConfigMatrix};
use entaudit_http::EndpointConfig;

pub const ENV_BASE_URL: &str = "ENTAUDIT_BASE_URL";
pub const ENV_API_KEY: &str = "ENTAUDIT_API_KEY";

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub taxonomy: Option<PathBuf>,
    pub entities: Option<PathBuf>,
    pub schemas: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub languages: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub store: PathBuf,
    pub concurrency: usize,
    pub chunk_size: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { store: "run/observations.log".into(), concurrency: 8, chunk_size: 256 }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub model: Option<String>,
    pub vocabulary: Option<PathBuf>,
    pub examples: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataPaths,
    pub matrix: ConfigMatrix,
    pub endpoint: EndpointConfig,
    pub run: RunSection,
    pub mock: BiasProfile,
    pub synth: SynthSection,
    #[serde(skip)]
    pub root: PathBuf,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: Config = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.apply_env(|k| std::env::var(k).ok());
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let Some(url) = get(ENV_BASE_URL).filter(|s| !s.is_empty()) {
            self.endpoint.base_url = url;
        }
        if let Some(key) = get(ENV_API_KEY).filter(|s| !s.is_empty()) {
            self.endpoint.api_key = Some(key);
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    fn required(&self, p: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
        p.as_deref().map(|p| self.resolve(p)).with_context(|| format!("config key {key} is not set"))
    }

    pub fn store_path(&self, overridden: Option<&Path>) -> PathBuf {
        overridden.map(Path::to_path_buf).unwrap_or_else(|| self.resolve(&self.run.store))
    }

    pub fn taxonomy(&self) -> Result<Taxonomy> {
        match &self.data.taxonomy {
            Some(p) => Ok(Taxonomy::from_path(&self.resolve(p))?),
            None => Ok(Taxonomy::default()),
        }
    }

    pub fn schemas(&self) -> Result<SchemaSet> {
        let path = self.required(&self.data.schemas, "data.schemas")?;
        SchemaSet::load(registry::open(&path)?).with_context(|| format!("loading {}", path.display()))
    }

    pub fn entities(&self, taxonomy: &Taxonomy) -> Result<EntityRegistry> {
        let path = self.required(&self.data.entities, "data.entities")?;
        registry::load_entities(registry::open(&path)?, taxonomy, &self.data.languages)
            .with_context(|| format!("loading {}", path.display()))
    }

    /// Loads every registry, returning the template balance report as well.
    pub fn audit_data(&self) -> Result<(AuditData, registry::BalanceReport, Taxonomy)> {
        let taxonomy = self.taxonomy()?;
        let entities = self.entities(&taxonomy)?;
        let schemas = self.schemas()?;
        let path = self.required(&self.data.templates, "data.templates")?;
        let (corpus, balance) = registry::load_templates(registry::open(&path)?, &schemas, &self.data.languages)
            .with_context(|| format!("loading {}", path.display()))?;
        Ok((AuditData { entities, schemas, corpus }, balance, taxonomy))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_overrides_endpoint() {
        let mut cfg: Config = toml::from_str("[endpoint]\nbase_url = \"http://a/v1\"\n").unwrap();
        cfg.apply_env(|k| (k == ENV_API_KEY).then(|| "secret".to_string()));
        assert_eq!(cfg.endpoint.base_url, "http://a/v1");
        assert_eq!(cfg.endpoint.api_key.as_deref(), Some("secret"));
        cfg.apply_env(|k| (k == ENV_BASE_URL).then(|| "http://b/v1".to_string()));
        assert_eq!(cfg.endpoint.base_url, "http://b/v1");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<Config>("[run]\nstor = \"x\"\n").is_err());
    }

    #[test]
    fn matrix_parses_variant_names() {
        let cfg: Config =
            toml::from_str("[matrix]\nmodels = [\"m\"]\nlanguages = [\"en\"]\nvariants = [\"ZS-Text\", \"fs-num\"]\n")
                .unwrap();
        assert_eq!(cfg.matrix.variants.len(), 2);
        assert!(cfg.matrix.tasks.is_empty());
    }
}
