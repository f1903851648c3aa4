//! TLV record schema, JSONL manifest persistence and dataset statistics.
//!
//! A manifest is newline-delimited JSON, one [`TlvRecord`] per line. Image
//! paths are stored relative to the manifest's directory so a dataset folder
//! can be moved as a unit. Writes go to a sibling temp file that is renamed
//! over the target, so readers never observe a half-written manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fixed caption assigned to every frame pair where nothing is touched.
pub const UNTOUCHED_CAPTION: &str = "No object is being touched.";

/// Default manifest file name inside a dataset directory.
pub const MANIFEST_FILE: &str = "tlv_manifest.jsonl";

/// Canonical filter reason: the touched object is hidden from the camera.
pub const FILTER_OCCLUDED: &str = "occluded";
/// Canonical filter reason: the video never interacts with an object.
pub const FILTER_NO_INTERACTION: &str = "no_interaction";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("record {id}: {reason}")]
    Invalid { id: String, reason: String },
    #[error("manifest line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Axis-aligned box in vision-image pixel coordinates, half-open on the max side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BoundingBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> u32 {
        self.x_max.saturating_sub(self.x_min)
    }

    pub fn height(&self) -> u32 {
        self.y_max.saturating_sub(self.y_min)
    }

    /// Checks `x_min < x_max <= width` and `y_min < y_max <= height`.
    pub fn validate(&self, width: u32, height: u32) -> std::result::Result<(), String> {
        if self.x_min >= self.x_max {
            return Err(format!(
                "degenerate box: x_min {} >= x_max {}",
                self.x_min, self.x_max
            ));
        }
        if self.y_min >= self.y_max {
            return Err(format!(
                "degenerate box: y_min {} >= y_max {}",
                self.y_min, self.y_max
            ));
        }
        if self.x_max > width || self.y_max > height {
            return Err(format!(
                "box ({}, {}, {}, {}) exceeds image {}x{}",
                self.x_min, self.y_min, self.x_max, self.y_max, width, height
            ));
        }
        Ok(())
    }

    /// Ordering checks only, for when image dimensions are not at hand.
    pub fn is_well_formed(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    PendingAnnotation,
    Annotated,
    Filtered,
    Captioned,
}

impl RecordStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RecordStatus::PendingAnnotation => "pending_annotation",
            RecordStatus::Annotated => "annotated",
            RecordStatus::Filtered => "filtered",
            RecordStatus::Captioned => "captioned",
        }
    }
}

/// Where a record's frames came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSource {
    pub video_id: String,
    pub visual_frame_index: usize,
    pub tactile_frame_index: usize,
}

/// One aligned touch/vision/caption sample.
///
/// `labels` is only populated for evaluation manifests (task name to lexical
/// label) and is omitted from the JSON when empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TlvRecord {
    pub id: String,
    pub touch_image_path: PathBuf,
    pub vision_image_path: PathBuf,
    pub caption: String,
    pub touched: bool,
    pub object_name: Option<String>,
    pub bbox: Option<BoundingBox>,
    pub status: RecordStatus,
    pub filter_reason: Option<String>,
    pub source: FrameSource,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<String, String>,
}

/// Deterministic record id: `{video_id}:{visual_frame_index}`.
pub fn record_id(video_id: &str, visual_frame_index: usize) -> String {
    format!("{video_id}:{visual_frame_index}")
}

impl TlvRecord {
    /// A captioned untouched record for the given source frames.
    pub fn untouched(
        source: FrameSource,
        touch_image_path: PathBuf,
        vision_image_path: PathBuf,
    ) -> Self {
        Self {
            id: record_id(&source.video_id, source.visual_frame_index),
            touch_image_path,
            vision_image_path,
            caption: UNTOUCHED_CAPTION.to_string(),
            touched: false,
            object_name: None,
            bbox: None,
            status: RecordStatus::Captioned,
            filter_reason: None,
            source,
            labels: BTreeMap::new(),
        }
    }

    /// A touched record waiting for a human box annotation.
    pub fn pending(
        source: FrameSource,
        touch_image_path: PathBuf,
        vision_image_path: PathBuf,
    ) -> Self {
        Self {
            id: record_id(&source.video_id, source.visual_frame_index),
            touch_image_path,
            vision_image_path,
            caption: String::new(),
            touched: true,
            object_name: None,
            bbox: None,
            status: RecordStatus::PendingAnnotation,
            filter_reason: None,
            source,
            labels: BTreeMap::new(),
        }
    }

    pub fn is_usable(&self) -> bool {
        self.status != RecordStatus::Filtered
    }
}

/// Checks every record-level invariant. Box bounds against the image size are
/// checked by the annotation service, which has the image at hand.
pub fn validate_record(record: &TlvRecord) -> Result<()> {
    let fail = |reason: String| DatasetError::Invalid {
        id: record.id.clone(),
        reason,
    };
    if record.id.is_empty() {
        return Err(fail("empty id".into()));
    }
    if !record.touched && record.caption != UNTOUCHED_CAPTION {
        return Err(fail(format!(
            "untouched record must carry the caption {UNTOUCHED_CAPTION:?}, found {:?}",
            record.caption
        )));
    }
    match record.status {
        RecordStatus::Captioned if record.caption.trim().is_empty() => {
            return Err(fail("captioned record has an empty caption".into()));
        }
        RecordStatus::Filtered
            if record
                .filter_reason
                .as_deref()
                .is_none_or(|r| r.trim().is_empty()) =>
        {
            return Err(fail("filtered record has no filter_reason".into()));
        }
        _ => {}
    }
    if record.touched
        && matches!(
            record.status,
            RecordStatus::Annotated | RecordStatus::Captioned
        )
    {
        match (&record.bbox, &record.object_name) {
            (Some(b), Some(name)) => {
                if !b.is_well_formed() {
                    return Err(fail(format!("degenerate bbox {b:?}")));
                }
                if name.trim().is_empty() {
                    return Err(fail("empty object_name".into()));
                }
            }
            _ => {
                return Err(fail(
                    "touched annotated record requires bbox and object_name".into(),
                ))
            }
        }
    }
    Ok(())
}

/// Writes `records` as JSONL, replacing `path` atomically.
pub fn write_manifest(records: &[TlvRecord], path: &Path) -> Result<()> {
    for r in records {
        validate_record(r)?;
    }
    let mut buf = Vec::with_capacity(records.len() * 256);
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| DatasetError::Invalid {
            id: r.id.clone(),
            reason: e.to_string(),
        })?;
        buf.push(b'\n');
    }
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| MANIFEST_FILE.to_string());
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(&buf).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

/// Reads a JSONL manifest. Blank lines are skipped; malformed lines are
/// reported with their 1-based line number.
pub fn read_manifest(path: &Path) -> Result<Vec<TlvRecord>> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TlvRecord =
            serde_json::from_str(&line).map_err(|e| DatasetError::Malformed {
                line: i + 1,
                reason: e.to_string(),
            })?;
        validate_record(&record).map_err(|e| DatasetError::Malformed {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Resolves a record's relative image path against the manifest location.
pub fn resolve_image_path(manifest_path: &Path, image_path: &Path) -> PathBuf {
    if image_path.is_absolute() {
        return image_path.to_path_buf();
    }
    manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(image_path)
}

/// Relative path of the red-box derivative of a record's vision image.
pub fn highlight_image_path(id: &str) -> PathBuf {
    PathBuf::from("highlight").join(format!("{}.png", id.replace(['/', '\\', ':'], "_")))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub touched_count: usize,
    pub untouched_count: usize,
    pub filtered_count: usize,
    pub total_usable: usize,
}

/// Partitions records by touched flag, with filtered records counted apart.
pub fn dataset_stats(records: &[TlvRecord]) -> DatasetStats {
    let mut stats = DatasetStats::default();
    for r in records {
        if !r.is_usable() {
            stats.filtered_count += 1;
        } else if r.touched {
            stats.touched_count += 1;
        } else {
            stats.untouched_count += 1;
        }
    }
    stats.total_usable = stats.touched_count + stats.untouched_count;
    stats
}

#[cfg(test)]
mod tests {
    use super::*;

    fn source(v: &str, i: usize) -> FrameSource {
        FrameSource {
            video_id: v.into(),
            visual_frame_index: i,
            tactile_frame_index: i,
        }
    }

    fn captioned(v: &str) -> TlvRecord {
        let mut r = TlvRecord::pending(source(v, 12), "t.png".into(), "v.png".into());
        r.object_name = Some("ball".into());
        r.bbox = Some(BoundingBox::new(1, 2, 10, 12));
        r.caption = "The top of the ball is made of rubber; it feels smooth and soft.".into();
        r.status = RecordStatus::Captioned;
        r
    }

    #[test]
    fn empty_manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        write_manifest(&[], &path).unwrap();
        assert_eq!(fs::read(&path).unwrap().len(), 0);
        assert!(read_manifest(&path).unwrap().is_empty());
    }

    #[test]
    fn untouched_line_carries_fixed_caption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let r = TlvRecord::untouched(source("vid", 39), "t.png".into(), "v.png".into());
        write_manifest(&[r], &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(v["caption"], "No object is being touched.");
        assert_eq!(v["id"], "vid:39");
    }

    #[test]
    fn missing_caption_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let good = serde_json::to_string(&captioned("a")).unwrap();
        let mut bad: serde_json::Value = serde_json::from_str(&good).unwrap();
        bad.as_object_mut().unwrap().remove("caption");
        fs::write(&path, format!("{good}\n{bad}\n")).unwrap();
        match read_manifest(&path) {
            Err(DatasetError::Malformed { line, reason }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("caption"), "{reason}");
            }
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_manifest(Path::new("/nonexistent/tlv_manifest.jsonl")).unwrap_err();
        assert!(matches!(err, DatasetError::Io { .. }));
    }

    #[test]
    fn write_rejects_invalid_record_by_id() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = TlvRecord::untouched(source("v9", 39), "t".into(), "v".into());
        r.caption = "something else".into();
        let err = write_manifest(&[r], &dir.path().join("m.jsonl")).unwrap_err();
        assert!(err.to_string().contains("v9:39"));
    }

    #[test]
    fn validation_rules() {
        let mut r = captioned("x");
        assert!(validate_record(&r).is_ok());
        r.bbox = None;
        assert!(validate_record(&r).is_err());

        let mut f = TlvRecord::pending(source("y", 3), "t".into(), "v".into());
        f.status = RecordStatus::Filtered;
        assert!(validate_record(&f).is_err());
        f.filter_reason = Some(FILTER_OCCLUDED.into());
        assert!(validate_record(&f).is_ok());

        let mut c = captioned("z");
        c.caption = "  ".into();
        assert!(validate_record(&c).is_err());

        let mut d = captioned("w");
        d.bbox = Some(BoundingBox::new(5, 5, 5, 9));
        assert!(validate_record(&d).is_err());

        // pending touched records have no box yet
        assert!(validate_record(&TlvRecord::pending(source("p", 1), "t".into(), "v".into())).is_ok());
    }

    #[test]
    fn bbox_bounds() {
        assert!(BoundingBox::new(0, 0, 32, 32).validate(32, 32).is_ok());
        assert!(BoundingBox::new(0, 0, 33, 32).validate(32, 32).is_err());
        assert!(BoundingBox::new(4, 0, 4, 32).validate(32, 32).is_err());
    }

    #[test]
    fn stats_counting() {
        assert_eq!(dataset_stats(&[]), DatasetStats::default());
        let mut records = vec![captioned("a"), captioned("b")];
        for i in 0..3 {
            records.push(TlvRecord::untouched(source(&format!("u{i}"), 39), "t".into(), "v".into()));
        }
        let mut f = TlvRecord::pending(source("f", 7), "t".into(), "v".into());
        f.status = RecordStatus::Filtered;
        f.filter_reason = Some(FILTER_NO_INTERACTION.into());
        records.push(f);
        assert_eq!(
            dataset_stats(&records),
            DatasetStats {
                touched_count: 2,
                untouched_count: 3,
                filtered_count: 1,
                total_usable: 5
            }
        );
    }

    #[test]
    fn relative_paths_resolve_against_manifest_dir() {
        let p = resolve_image_path(Path::new("/data/tlv/tlv_manifest.jsonl"), Path::new("touch/a.png"));
        assert_eq!(p, PathBuf::from("/data/tlv/touch/a.png"));
    }

    #[test]
    fn highlight_paths_are_flat_file_names() {
        assert_eq!(highlight_image_path("vid/7:12"), PathBuf::from("highlight/vid_7_12.png"));
    }
}
