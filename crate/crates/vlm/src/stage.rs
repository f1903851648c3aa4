//! Caption stage: turns annotated records into captioned ones.
//!
//! Touched records need status `annotated` and a highlight image. Untouched
//! records always get the fixed caption. A record either ends up captioned
//! or keeps its previous state; the manifest is rewritten after every
//! caption.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tlv_core::caption::{
    build_prompt, caption_untouched, normalize_response, template_caption, CaptionAttributes,
    CaptionError, CaptionResult, Provenance,
};
use tlv_core::dataset::{
    self, highlight_image_path, resolve_image_path, DatasetError, RecordStatus, TlvRecord,
};

use crate::client::{ChatClient, VlmError};

#[derive(Debug, Error)]
pub enum StageError {
    #[error("record `{0}` is untouched; it takes the fixed caption")]
    Untouched(String),
    #[error("record `{id}` is {status}, expected annotated")]
    WrongStatus { id: String, status: &'static str },
    #[error("record `{0}` has no object name")]
    MissingObjectName(String),
    #[error("highlight image {path}: {reason}")]
    Highlight { path: PathBuf, reason: String },
    #[error("record `{id}`: {source}")]
    Caption { id: String, source: CaptionError },
    #[error("record `{id}`: {source}")]
    Vlm { id: String, source: VlmError },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

pub type Result<T> = std::result::Result<T, StageError>;

/// Anything that can describe a highlighted image.
pub trait Captioner {
    fn model(&self) -> &str;
    fn describe(&mut self, prompt: &str, png: &[u8]) -> std::result::Result<String, VlmError>;
}

impl Captioner for ChatClient {
    fn model(&self) -> &str {
        &self.config().model
    }

    fn describe(&mut self, prompt: &str, png: &[u8]) -> std::result::Result<String, VlmError> {
        self.complete(prompt, png)
    }
}

fn check_annotated(record: &TlvRecord) -> Result<String> {
    if !record.touched {
        return Err(StageError::Untouched(record.id.clone()));
    }
    if record.status != RecordStatus::Annotated {
        return Err(StageError::WrongStatus {
            id: record.id.clone(),
            status: record.status.as_str(),
        });
    }
    record
        .object_name
        .clone()
        .filter(|n| !n.trim().is_empty())
        .ok_or_else(|| StageError::MissingObjectName(record.id.clone()))
}

fn set_caption(record: &mut TlvRecord, caption: &str) {
    record.caption = caption.to_string();
    record.status = RecordStatus::Captioned;
}

/// Sends the prompt and the record's highlight image to `captioner`. The
/// record is only modified on success.
pub fn caption_touched(
    record: &mut TlvRecord,
    manifest: &Path,
    captioner: &mut dyn Captioner,
) -> Result<CaptionResult> {
    let object = check_annotated(record)?;
    let caption_err = |source| StageError::Caption {
        id: record.id.clone(),
        source,
    };
    let prompt = build_prompt(&object).map_err(caption_err)?;
    let path = resolve_image_path(manifest, &highlight_image_path(&record.id));
    let png = fs::read(&path).map_err(|e| StageError::Highlight {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let raw = captioner.describe(&prompt, &png).map_err(|source| StageError::Vlm {
        id: record.id.clone(),
        source,
    })?;
    let caption = normalize_response(&raw);
    if caption.is_empty() {
        return Err(StageError::Vlm {
            id: record.id.clone(),
            source: VlmError::EmptyResponse,
        });
    }
    set_caption(record, &caption);
    Ok(CaptionResult {
        record_id: record.id.clone(),
        caption,
        provenance: Provenance::Vlm,
        model: Some(captioner.model().to_string()),
    })
}

fn label<'a>(record: &'a TlvRecord, keys: &[&str]) -> &'a str {
    keys.iter()
        .find_map(|k| record.labels.get(*k))
        .map_or("", String::as_str)
}

/// Template attributes of a record: the object name plus the `location`,
/// `material`, `texture`/`roughsmooth` and `hardness`/`hardsoft` labels.
pub fn template_attributes(record: &TlvRecord) -> CaptionAttributes {
    CaptionAttributes {
        object_name: record.object_name.clone().unwrap_or_default(),
        location: label(record, &["location"]).to_string(),
        material: label(record, &["material"]).to_string(),
        texture: label(record, &["texture", "roughsmooth"]).to_string(),
        hardness: label(record, &["hardness", "hardsoft"]).to_string(),
    }
}

/// Offline counterpart of [`caption_touched`].
pub fn caption_template(record: &mut TlvRecord) -> Result<CaptionResult> {
    check_annotated(record)?;
    let caption =
        template_caption(&template_attributes(record)).map_err(|source| StageError::Caption {
            id: record.id.clone(),
            source,
        })?;
    set_caption(record, &caption);
    Ok(CaptionResult {
        record_id: record.id.clone(),
        caption,
        provenance: Provenance::Template,
        model: None,
    })
}

pub enum CaptionMode<'a> {
    Vlm(&'a mut dyn Captioner),
    Template,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub results: Vec<CaptionResult>,
    /// `(record id, error)` for touched records left unchanged.
    pub failures: Vec<(String, String)>,
    /// Records with nothing to do: pending, filtered or already captioned.
    pub skipped: usize,
}

/// Captions every annotated record and fixes every untouched caption.
pub fn run_caption_stage(manifest: &Path, mut mode: CaptionMode<'_>) -> Result<StageSummary> {
    let mut records = dataset::read_manifest(manifest)?;
    let mut summary = StageSummary::default();
    let mut dirty = false;
    for i in 0..records.len() {
        let record = &mut records[i];
        if !record.touched {
            if record.caption != caption_untouched() || record.status != RecordStatus::Captioned {
                set_caption(record, caption_untouched());
                dirty = true;
            }
            summary.results.push(CaptionResult {
                record_id: record.id.clone(),
                caption: caption_untouched().to_string(),
                provenance: Provenance::FixedUntouched,
                model: None,
            });
            continue;
        }
        if record.status != RecordStatus::Annotated {
            summary.skipped += 1;
            continue;
        }
        let mut candidate = record.clone();
        let outcome = match &mut mode {
            CaptionMode::Vlm(c) => caption_touched(&mut candidate, manifest, &mut **c),
            CaptionMode::Template => caption_template(&mut candidate),
        };
        match outcome {
            Ok(result) => {
                *record = candidate;
                dataset::write_manifest(&records, manifest)?;
                dirty = false;
                summary.results.push(result);
            }
            Err(e) => {
                log::warn!("{e}");
                summary.failures.push((record.id.clone(), e.to_string()));
            }
        }
    }
    if dirty {
        dataset::write_manifest(&records, manifest)?;
    }
    Ok(summary)
}
