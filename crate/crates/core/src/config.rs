//! Layered pipeline configuration: TOML file, then `MIRAGE_*` environment
//! overrides, then command-line flags (applied by the caller).
//!
//! An environment variable `MIRAGE_A__B` overrides key `b` of table `a`;
//! `MIRAGE_SEED` overrides the top-level `seed`. Values are parsed as TOML
//! literals when possible and taken as strings otherwise.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::{EndpointConfig, RetryPolicy};
use crate::downstream::TrainConfig;
use crate::error::{Error, Result};
use crate::maskgen::{SemanticExtractorSpec, StructuralExtractorSpec};
use crate::metrics::ImageScoreRule;

pub const ENV_PREFIX: &str = "MIRAGE_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposeConfig {
    pub k_reference_images: usize,
    pub defects_per_category: usize,
    pub endpoint: Option<EndpointConfig>,
}

impl Default for ProposeConfig {
    fn default() -> Self {
        Self {
            k_reference_images: 5,
            defects_per_category: 5,
            endpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub per_defect: usize,
    pub concurrency: usize,
    /// Backend calls per second; unset means unlimited.
    pub rate_limit: Option<f64>,
    pub retry: RetryPolicy,
    pub endpoint: Option<EndpointConfig>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            per_defect: 50,
            concurrency: 4,
            rate_limit: None,
            retry: RetryPolicy::default(),
            endpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub embedding_dim: usize,
    pub endpoint: Option<EndpointConfig>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 64,
            endpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub semantic: SemanticExtractorSpec,
    pub structural: StructuralExtractorSpec,
    pub semantic_endpoint: Option<EndpointConfig>,
    pub structural_endpoint: Option<EndpointConfig>,
    pub max_reference_masks: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            semantic: SemanticExtractorSpec::default(),
            structural: StructuralExtractorSpec::default(),
            semantic_endpoint: None,
            structural_endpoint: None,
            max_reference_masks: 8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub classifier_endpoint: Option<EndpointConfig>,
    pub perceptual_endpoint: Option<EndpointConfig>,
    pub image_score_rule: ImageScoreRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub port: u16,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self { port: 8080 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Fixed timestamp (ms) written to every record; makes runs byte-reproducible.
    pub fixed_timestamp_ms: Option<u64>,
    pub propose: ProposeConfig,
    pub generate: GenerateConfig,
    pub filter: FilterConfig,
    pub mask: MaskConfig,
    pub eval: EvalConfig,
    pub train: TrainConfig,
    pub study: StudyConfig,
}

fn parse_env_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{p} is not a table")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl PipelineConfig {
    /// Parses TOML text and applies the given `(name, value)` environment pairs.
    pub fn from_sources<I>(toml_text: Option<&str>, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table = match toml_text {
            Some(t) => t
                .parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("invalid config file: {e}")))?,
            None => toml::Table::new(),
        };
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        overrides.sort();
        for (k, v) in overrides {
            let path: Vec<String> = k[ENV_PREFIX.len()..]
                .split("__")
                .map(str::to_ascii_lowercase)
                .collect();
            if path.iter().any(String::is_empty) {
                continue;
            }
            set_path(&mut table, &path, parse_env_value(&v))?;
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))
    }

    /// Loads `path` (if any) and overlays the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::from_sources(text.as_deref(), std::env::vars())
    }
}
