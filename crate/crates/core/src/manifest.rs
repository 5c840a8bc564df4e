//! The generation manifest: one JSON [`GenerationRecord`] per line.
//!
//! The generation stage only appends. Later stages (filter, mask) rewrite the
//! whole file through a temporary file and an atomic rename, so a reader never
//! observes a partially written manifest.

use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::SimilarityQuad;
use crate::image::ImageRef;
use crate::promptgen::DefectDescription;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Pending,
    Generated,
    FilteredOut,
    Masked,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub record_id: String,
    pub category: String,
    pub defect: DefectDescription,
    pub normal_image: ImageRef,
    pub generated_image: Option<ImageRef>,
    pub generation_prompt: String,
    pub prompt_version: String,
    pub status: RecordStatus,
    #[serde(default)]
    pub similarities: Option<SimilarityQuad>,
    #[serde(default)]
    pub filter_reasons: Vec<String>,
    #[serde(default)]
    pub score_path: Option<PathBuf>,
    #[serde(default)]
    pub mask_path: Option<PathBuf>,
    #[serde(default)]
    pub reference_mask_path: Option<PathBuf>,
    #[serde(default)]
    pub threshold_used: Option<f64>,
    pub attempts: u32,
    #[serde(default)]
    pub error: Option<String>,
    pub seed: u64,
    pub created_at_ms: u64,
    pub updated_at_ms: u64,
}

impl GenerationRecord {
    /// Checks the status/field invariants.
    pub fn validate(&self, max_retries: Option<u32>) -> Result<()> {
        if self.status == RecordStatus::Masked && self.mask_path.is_none() {
            return Err(Error::validation(format!(
                "record {} is masked but has no mask path",
                self.record_id
            )));
        }
        let needs_image = matches!(
            self.status,
            RecordStatus::Generated | RecordStatus::FilteredOut | RecordStatus::Masked
        );
        if needs_image && self.generated_image.is_none() {
            return Err(Error::validation(format!(
                "record {} has status {:?} but no generated image",
                self.record_id, self.status
            )));
        }
        if let Some(m) = max_retries {
            if self.attempts > m + 1 {
                return Err(Error::validation(format!(
                    "record {} used {} attempts, more than allowed",
                    self.record_id, self.attempts
                )));
            }
        }
        Ok(())
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<GenerationRecord>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: GenerationRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            message: format!("{} line {}: {e}", path.display(), i + 1),
            raw: line.to_string(),
        })?;
        if !seen.insert(rec.record_id.clone()) {
            return Err(Error::Parse {
                message: format!(
                    "{} line {}: duplicate record id {}",
                    path.display(),
                    i + 1,
                    rec.record_id
                ),
                raw: line.to_string(),
            });
        }
        records.push(rec);
    }
    Ok(records)
}

fn record_line(rec: &GenerationRecord) -> Result<String> {
    let mut line = serde_json::to_string(rec)
        .map_err(|e| Error::Format(format!("cannot serialize record: {e}")))?;
    line.push('\n');
    Ok(line)
}

/// Appends records to the manifest; each line goes out in a single write.
pub struct ManifestWriter {
    path: PathBuf,
    file: std::fs::File,
}

impl ManifestWriter {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, rec: &GenerationRecord) -> Result<()> {
        let line = record_line(rec)?;
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Replaces the manifest contents atomically.
pub fn rewrite_manifest(path: &Path, records: &[GenerationRecord]) -> Result<()> {
    let mut body = String::new();
    for r in records {
        body.push_str(&record_line(r)?);
    }
    let tmp = path.with_extension("jsonl.tmp");
    std::fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Directory that manifest-relative paths resolve against.
pub fn dataset_root(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}
