//! Annotation queue over a manifest with write-through persistence.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tlv_core::dataset::{
    self, highlight_image_path, resolve_image_path, BoundingBox, DatasetError, RecordStatus,
    TlvRecord,
};

use crate::highlight::{render_highlight, HighlightError};

/// A leased task returns to the queue after this long without an answer.
pub const LEASE_TIMEOUT: Duration = Duration::from_secs(10 * 60);

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("unknown record `{0}`")]
    UnknownRecord(String),
    #[error("record `{id}` is already {status}")]
    AlreadyFinal { id: String, status: &'static str },
    #[error("record `{0}` is untouched and needs no box")]
    Untouched(String),
    #[error("invalid annotation: {0}")]
    InvalidResult(String),
    #[error("record `{id}`: {reason}")]
    BadBox { id: String, reason: String },
    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error(transparent)]
    Highlight(#[from] HighlightError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

pub type Result<T> = std::result::Result<T, AnnotateError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub record_id: String,
    /// URL of the vision image, relative to the service root.
    pub vision_image: String,
    pub status: RecordStatus,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskResponse {
    Task(AnnotationTask),
    Done,
}

/// Wire form of an annotator's decision: either `bbox` + `object_name`, or
/// `filtered: true` + `filter_reason`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AnnotationResult {
    pub record_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_name: Option<String>,
    #[serde(default)]
    pub filtered: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Box { bbox: BoundingBox, object_name: String },
    Filter { reason: String },
}

impl AnnotationResult {
    pub fn boxed(record_id: &str, bbox: BoundingBox, object_name: &str) -> Self {
        Self {
            record_id: record_id.into(),
            bbox: Some(bbox),
            object_name: Some(object_name.into()),
            ..Self::default()
        }
    }

    pub fn filter(record_id: &str, reason: &str) -> Self {
        Self {
            record_id: record_id.into(),
            filtered: true,
            filter_reason: Some(reason.into()),
            ..Self::default()
        }
    }

    /// Checks that exactly one arm is present and complete.
    pub fn decision(&self) -> Result<Decision> {
        let bad = |m: &str| Err(AnnotateError::InvalidResult(m.into()));
        let box_arm = self.bbox.is_some() || self.object_name.is_some();
        let filter_arm = self.filtered || self.filter_reason.is_some();
        match (box_arm, filter_arm) {
            (true, true) => bad("both a box and a filter decision were given"),
            (false, false) => bad("neither a box nor a filter decision was given"),
            (true, false) => {
                let name = self.object_name.as_deref().map(str::trim).unwrap_or("");
                match self.bbox {
                    None => bad("box arm needs `bbox`"),
                    Some(_) if name.is_empty() => bad("box arm needs a non-empty `object_name`"),
                    Some(bbox) => Ok(Decision::Box {
                        bbox,
                        object_name: name.to_string(),
                    }),
                }
            }
            (false, true) => {
                let reason = self.filter_reason.as_deref().map(str::trim).unwrap_or("");
                if !self.filtered {
                    bad("filter arm needs `filtered: true`")
                } else if reason.is_empty() {
                    bad("filter arm needs a non-empty `filter_reason`")
                } else {
                    Ok(Decision::Filter {
                        reason: reason.to_string(),
                    })
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    /// Touched records, i.e. everything that needs a decision.
    pub total: usize,
    pub completed: usize,
    pub pending: usize,
    pub leased: usize,
    pub annotated: usize,
    pub filtered: usize,
    pub captioned: usize,
}

/// In-memory view of a manifest. Every accepted submission rewrites the
/// manifest before it is applied in memory.
#[derive(Debug)]
pub struct AnnotationStore {
    manifest: PathBuf,
    records: Vec<TlvRecord>,
    index: HashMap<String, usize>,
    leases: HashMap<String, Instant>,
    lease_timeout: Duration,
}

/// Percent-encodes everything outside the URL unreserved set.
pub fn encode_segment(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'-' | b'.' | b'_' | b'~') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

impl AnnotationStore {
    pub fn open(manifest: &Path) -> Result<Self> {
        let records = dataset::read_manifest(manifest)?;
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if index.insert(r.id.clone(), i).is_some() {
                return Err(DatasetError::Invalid {
                    id: r.id.clone(),
                    reason: "duplicate record id".into(),
                }
                .into());
            }
        }
        Ok(Self {
            manifest: manifest.to_path_buf(),
            records,
            index,
            leases: HashMap::new(),
            lease_timeout: LEASE_TIMEOUT,
        })
    }

    pub fn with_lease_timeout(mut self, timeout: Duration) -> Self {
        self.lease_timeout = timeout;
        self
    }

    pub fn manifest_path(&self) -> &Path {
        &self.manifest
    }

    pub fn records(&self) -> &[TlvRecord] {
        &self.records
    }

    pub fn record(&self, id: &str) -> Result<&TlvRecord> {
        self.index
            .get(id)
            .map(|&i| &self.records[i])
            .ok_or_else(|| AnnotateError::UnknownRecord(id.to_string()))
    }

    pub fn vision_path(&self, id: &str) -> Result<PathBuf> {
        let r = self.record(id)?;
        Ok(resolve_image_path(&self.manifest, &r.vision_image_path))
    }

    /// Absolute location of the highlight derivative for `id`.
    pub fn highlight_path(&self, id: &str) -> PathBuf {
        resolve_image_path(&self.manifest, &highlight_image_path(id))
    }

    fn leased(&self, id: &str, now: Instant) -> bool {
        self.leases
            .get(id)
            .is_some_and(|&t| now.saturating_duration_since(t) < self.lease_timeout)
    }

    pub fn next_task(&mut self) -> Result<TaskResponse> {
        self.next_task_at(Instant::now())
    }

    /// Leases the first pending touched record that is not currently leased.
    pub fn next_task_at(&mut self, now: Instant) -> Result<TaskResponse> {
        let Some(i) = self.records.iter().position(|r| {
            r.touched && r.status == RecordStatus::PendingAnnotation && !self.leased(&r.id, now)
        }) else {
            return Ok(TaskResponse::Done);
        };
        let r = &self.records[i];
        let path = resolve_image_path(&self.manifest, &r.vision_image_path);
        let (width, height) = image::image_dimensions(&path).map_err(|e| AnnotateError::Image {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let task = AnnotationTask {
            record_id: r.id.clone(),
            vision_image: format!("/img/{}", encode_segment(&r.id)),
            status: r.status,
            width,
            height,
        };
        self.leases.insert(r.id.clone(), now);
        Ok(TaskResponse::Task(task))
    }

    /// Applies a decision, writes the highlight image for boxes and persists
    /// the manifest. Nothing changes in memory if persisting fails.
    pub fn submit(&mut self, result: &AnnotationResult) -> Result<TlvRecord> {
        let decision = result.decision()?;
        let i = *self
            .index
            .get(&result.record_id)
            .ok_or_else(|| AnnotateError::UnknownRecord(result.record_id.clone()))?;
        let current = &self.records[i];
        if !current.touched {
            return Err(AnnotateError::Untouched(current.id.clone()));
        }
        if current.status != RecordStatus::PendingAnnotation {
            return Err(AnnotateError::AlreadyFinal {
                id: current.id.clone(),
                status: current.status.as_str(),
            });
        }
        let mut updated = current.clone();
        match decision {
            Decision::Box { bbox, object_name } => {
                let path = resolve_image_path(&self.manifest, &current.vision_image_path);
                let image = image::open(&path)
                    .map_err(|e| AnnotateError::Image {
                        path: path.clone(),
                        reason: e.to_string(),
                    })?
                    .to_rgb8();
                bbox.validate(image.width(), image.height())
                    .map_err(|reason| AnnotateError::BadBox {
                        id: current.id.clone(),
                        reason,
                    })?;
                let highlighted = render_highlight(&image, &bbox)?;
                self.write_highlight(&current.id, &highlighted)?;
                updated.bbox = Some(bbox);
                updated.object_name = Some(object_name);
                updated.status = RecordStatus::Annotated;
            }
            Decision::Filter { reason } => {
                updated.status = RecordStatus::Filtered;
                updated.filter_reason = Some(reason);
            }
        }
        let mut next = self.records.clone();
        next[i] = updated.clone();
        dataset::write_manifest(&next, &self.manifest)?;
        self.records = next;
        self.leases.remove(&updated.id);
        Ok(updated)
    }

    fn write_highlight(&self, id: &str, image: &image::RgbImage) -> Result<()> {
        let path = self.highlight_path(id);
        let err = |reason: String| AnnotateError::Image {
            path: path.clone(),
            reason,
        };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| err(e.to_string()))?;
        }
        let tmp = path.with_extension("png.tmp");
        image
            .save_with_format(&tmp, image::ImageFormat::Png)
            .map_err(|e| err(e.to_string()))?;
        fs::rename(&tmp, &path).map_err(|e| err(e.to_string()))
    }

    pub fn progress(&self) -> Progress {
        self.progress_at(Instant::now())
    }

    pub fn progress_at(&self, now: Instant) -> Progress {
        let mut p = Progress::default();
        for r in self.records.iter().filter(|r| r.touched) {
            p.total += 1;
            match r.status {
                RecordStatus::PendingAnnotation => {
                    p.pending += 1;
                    if self.leased(&r.id, now) {
                        p.leased += 1;
                    }
                }
                RecordStatus::Annotated => p.annotated += 1,
                RecordStatus::Filtered => p.filtered += 1,
                RecordStatus::Captioned => p.captioned += 1,
            }
        }
        p.completed = p.total - p.pending;
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exactly_one_arm() {
        let b = BoundingBox::new(0, 0, 4, 4);
        assert!(AnnotationResult::boxed("a", b, "ball").decision().is_ok());
        assert!(AnnotationResult::filter("a", "occluded").decision().is_ok());
        assert!(AnnotationResult::boxed("a", b, "  ").decision().is_err());
        assert!(AnnotationResult::filter("a", "").decision().is_err());
        let mut both = AnnotationResult::boxed("a", b, "ball");
        both.filtered = true;
        assert!(both.decision().is_err());
        let none = AnnotationResult {
            record_id: "a".into(),
            ..Default::default()
        };
        assert!(none.decision().is_err());
        let reason_only = AnnotationResult {
            record_id: "a".into(),
            filter_reason: Some("occluded".into()),
            ..Default::default()
        };
        assert!(reason_only.decision().is_err());
    }

    #[test]
    fn wire_shapes() {
        let t = TaskResponse::Done;
        assert_eq!(serde_json::to_string(&t).unwrap(), r#"{"kind":"done"}"#);
        let r: AnnotationResult =
            serde_json::from_str(r#"{"record_id":"v:1","filtered":true,"filter_reason":"occluded"}"#)
                .unwrap();
        assert_eq!(r, AnnotationResult::filter("v:1", "occluded"));
    }

    #[test]
    fn segment_encoding() {
        assert_eq!(encode_segment("vid 1:12/x"), "vid%201%3A12%2Fx");
        assert_eq!(encode_segment("a-b_c.d~"), "a-b_c.d~");
    }
}
