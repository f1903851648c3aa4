//! Touched/untouched frame selection from synchronized visual and tactile
//! videos.
//!
//! Frame 0 is the background (the arm has not reached the object yet). The
//! touched frame is the one with the largest mean grayscale difference from
//! it; the untouched frame is always the 40th frame (index 39).

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use log::warn;
use thiserror::Error;

use crate::dataset::{FrameSource, TlvRecord};

/// 0-based index of the "40th frame".
pub const UNTOUCHED_FRAME_INDEX: usize = 39;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame size mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("video {video_id} has {len} frames, need at least {needed}")]
    TooShort {
        video_id: String,
        len: usize,
        needed: usize,
    },
    #[error("visual video has {visual} frames but tactile video has {tactile}")]
    LengthMismatch { visual: usize, tactile: usize },
    #[error("video {0} has no frames")]
    Empty(String),
    #[error("failed to read {path}: {reason}")]
    Load { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, FrameError>;

/// An ordered, pre-extracted frame sequence.
#[derive(Debug, Clone)]
pub struct VideoFrames {
    pub video_id: String,
    pub frames: Vec<RgbImage>,
    /// Informational only.
    pub fps: Option<f64>,
}

impl VideoFrames {
    pub fn new(video_id: impl Into<String>, frames: Vec<RgbImage>) -> Result<Self> {
        let video_id = video_id.into();
        let first = frames.first().ok_or_else(|| FrameError::Empty(video_id.clone()))?;
        let (w, h) = first.dimensions();
        for f in &frames[1..] {
            let (fw, fh) = f.dimensions();
            if (fw, fh) != (w, h) {
                return Err(FrameError::DimensionMismatch(w, h, fw, fh));
            }
        }
        Ok(Self {
            video_id,
            frames,
            fps: None,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Loads `%06d.png` frames from `dir` in index order.
    pub fn load_dir(video_id: impl Into<String>, dir: &Path) -> Result<Self> {
        let load_err = |path: &Path, reason: String| FrameError::Load {
            path: path.to_path_buf(),
            reason,
        };
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| load_err(dir, e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        let frames = paths
            .iter()
            .map(|p| {
                image::open(p)
                    .map(|img| img.to_rgb8())
                    .map_err(|e| load_err(p, e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(video_id, frames)
    }
}

/// Options for [`frame_difference_with`]. Blur is off unless requested.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DiffOptions {
    pub blur_radius: u32,
}

/// ITU-R 601 luma scaled by 1000, kept integral so differences are exact.
fn luma_milli(img: &RgbImage) -> Vec<i64> {
    img.pixels()
        .map(|p| 299 * p[0] as i64 + 587 * p[1] as i64 + 114 * p[2] as i64)
        .collect()
}

fn box_blur(values: &[i64], width: usize, height: usize, radius: usize) -> Vec<i64> {
    if radius == 0 {
        return values.to_vec();
    }
    let mut out = vec![0i64; values.len()];
    for y in 0..height {
        for x in 0..width {
            let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(height - 1));
            let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(width - 1));
            let mut sum = 0i64;
            for yy in y0..=y1 {
                sum += values[yy * width + x0..=yy * width + x1].iter().sum::<i64>();
            }
            let n = ((y1 - y0 + 1) * (x1 - x0 + 1)) as i64;
            out[y * width + x] = sum / n;
        }
    }
    out
}

/// Mean absolute grayscale difference between two frames, in 8-bit intensity
/// units.
pub fn frame_difference(frame: &RgbImage, background: &RgbImage) -> Result<f64> {
    frame_difference_with(frame, background, DiffOptions::default())
}

pub fn frame_difference_with(
    frame: &RgbImage,
    background: &RgbImage,
    opts: DiffOptions,
) -> Result<f64> {
    let (w, h) = frame.dimensions();
    let (bw, bh) = background.dimensions();
    if (w, h) != (bw, bh) {
        return Err(FrameError::DimensionMismatch(w, h, bw, bh));
    }
    let n = (w as usize) * (h as usize);
    if n == 0 {
        return Ok(0.0);
    }
    let r = opts.blur_radius as usize;
    let a = box_blur(&luma_milli(frame), w as usize, h as usize, r);
    let b = box_blur(&luma_milli(background), w as usize, h as usize, r);
    let total: i64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
    Ok(total as f64 / (1000.0 * n as f64))
}

/// Result of scanning a video against its first frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TouchedSelection {
    pub index: usize,
    /// One score per frame; entry 0 is the background against itself.
    pub scores: Vec<f64>,
    /// Every frame is identical to the background, so the pick is arbitrary.
    pub zero_signal: bool,
}

pub fn select_touched_frame(video: &VideoFrames) -> Result<TouchedSelection> {
    select_touched_frame_with(video, DiffOptions::default())
}

/// Argmax of the background difference over frames `1..N`, lowest index on
/// ties.
pub fn select_touched_frame_with(
    video: &VideoFrames,
    opts: DiffOptions,
) -> Result<TouchedSelection> {
    if video.len() < 2 {
        return Err(FrameError::TooShort {
            video_id: video.video_id.clone(),
            len: video.len(),
            needed: 2,
        });
    }
    let background = &video.frames[0];
    let scores = video
        .frames
        .iter()
        .map(|f| frame_difference_with(f, background, opts))
        .collect::<Result<Vec<_>>>()?;
    let mut index = 1;
    for (i, &s) in scores.iter().enumerate().skip(2) {
        if s > scores[index] {
            index = i;
        }
    }
    let zero_signal = scores[index] == 0.0;
    if zero_signal {
        warn!(
            "video {}: no frame differs from the background; touched frame defaults to 1",
            video.video_id
        );
    }
    Ok(TouchedSelection {
        index,
        scores,
        zero_signal,
    })
}

pub fn select_untouched_frame(video: &VideoFrames) -> Result<usize> {
    if video.len() <= UNTOUCHED_FRAME_INDEX {
        return Err(FrameError::TooShort {
            video_id: video.video_id.clone(),
            len: video.len(),
            needed: UNTOUCHED_FRAME_INDEX + 1,
        });
    }
    Ok(UNTOUCHED_FRAME_INDEX)
}

/// A record draft plus the synchronized frames it refers to.
#[derive(Debug, Clone)]
pub struct FrameDraft {
    pub record: TlvRecord,
    pub vision: RgbImage,
    pub touch: RgbImage,
    pub zero_signal: bool,
}

#[derive(Debug, Clone)]
pub struct PairDrafts {
    pub touched: FrameDraft,
    pub untouched: FrameDraft,
}

/// Relative image paths used for a frame of `video_id`.
pub fn draft_image_paths(video_id: &str, index: usize) -> (PathBuf, PathBuf) {
    let stem = format!("{}_{index:06}.png", video_id.replace(['/', '\\', ':'], "_"));
    (
        PathBuf::from("touch").join(&stem),
        PathBuf::from("vision").join(&stem),
    )
}

/// Selects both frame pairs; the touched index is found on the visual stream
/// and applied to both streams.
pub fn extract_pair(visual: &VideoFrames, tactile: &VideoFrames) -> Result<PairDrafts> {
    extract_pair_with(visual, tactile, DiffOptions::default())
}

pub fn extract_pair_with(
    visual: &VideoFrames,
    tactile: &VideoFrames,
    opts: DiffOptions,
) -> Result<PairDrafts> {
    if visual.len() != tactile.len() {
        return Err(FrameError::LengthMismatch {
            visual: visual.len(),
            tactile: tactile.len(),
        });
    }
    let untouched_idx = select_untouched_frame(visual)?;
    let selection = select_touched_frame_with(visual, opts)?;
    let draft = |index: usize, touched: bool| {
        let source = FrameSource {
            video_id: visual.video_id.clone(),
            visual_frame_index: index,
            tactile_frame_index: index,
        };
        let (touch_path, vision_path) = draft_image_paths(&visual.video_id, index);
        let record = if touched {
            TlvRecord::pending(source, touch_path, vision_path)
        } else {
            TlvRecord::untouched(source, touch_path, vision_path)
        };
        FrameDraft {
            record,
            vision: visual.frames[index].clone(),
            touch: tactile.frames[index].clone(),
            zero_signal: touched && selection.zero_signal,
        }
    };
    Ok(PairDrafts {
        touched: draft(selection.index, true),
        untouched: draft(untouched_idx, false),
    })
}

/// Lists video-pair directories under `root`: `root` itself if it holds
/// `visual/` and `tactile/`, otherwise its immediate subdirectories that do.
pub fn discover_pairs(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    let is_pair = |p: &Path| p.join("visual").is_dir() && p.join("tactile").is_dir();
    if is_pair(root) {
        let id = root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "video".into());
        return Ok(vec![(id, root.to_path_buf())]);
    }
    let mut out: Vec<(String, PathBuf)> = fs::read_dir(root)
        .map_err(|e| FrameError::Load {
            path: root.to_path_buf(),
            reason: e.to_string(),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_pair(p))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), p))
        .collect();
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{RecordStatus, UNTOUCHED_CAPTION};
    use image::Rgb;

    fn flat(w: u32, h: u32, v: u8) -> RgbImage {
        RgbImage::from_pixel(w, h, Rgb([v, v, v]))
    }

    fn video(n: usize, bumps: &[(usize, u8)]) -> VideoFrames {
        let frames = (0..n)
            .map(|i| {
                let mut f = flat(8, 8, 10);
                for &(idx, amount) in bumps {
                    if idx == i {
                        f.put_pixel(3, 3, Rgb([10 + amount, 10 + amount, 10 + amount]));
                    }
                }
                f
            })
            .collect();
        VideoFrames::new("v", frames).unwrap()
    }

    #[test]
    fn difference_hand_cases() {
        assert_eq!(frame_difference(&flat(10, 10, 7), &flat(10, 10, 7)).unwrap(), 0.0);
        assert_eq!(frame_difference(&flat(10, 10, 0), &flat(10, 10, 255)).unwrap(), 255.0);
        let mut one = flat(10, 10, 20);
        one.put_pixel(4, 6, Rgb([220, 220, 220]));
        assert_eq!(frame_difference(&one, &flat(10, 10, 20)).unwrap(), 2.0);
    }

    #[test]
    fn difference_rejects_size_mismatch() {
        assert!(matches!(
            frame_difference(&flat(4, 4, 0), &flat(4, 5, 0)),
            Err(FrameError::DimensionMismatch(..))
        ));
    }

    #[test]
    fn blur_option_smooths_single_pixel() {
        let mut one = flat(10, 10, 20);
        one.put_pixel(5, 5, Rgb([220, 220, 220]));
        let sharp = frame_difference(&one, &flat(10, 10, 20)).unwrap();
        let blurred =
            frame_difference_with(&one, &flat(10, 10, 20), DiffOptions { blur_radius: 1 }).unwrap();
        assert!(blurred > 0.0 && blurred <= sharp);
    }

    #[test]
    fn touched_frame_selection() {
        assert_eq!(select_touched_frame(&video(5, &[(3, 90)])).unwrap().index, 3);
        assert_eq!(select_touched_frame(&video(6, &[(2, 50), (4, 50)])).unwrap().index, 2);
        let flat_video = video(4, &[]);
        let sel = select_touched_frame(&flat_video).unwrap();
        assert_eq!(sel.index, 1);
        assert_eq!(sel.scores[1], 0.0);
        assert!(sel.zero_signal);
        assert!(matches!(
            select_touched_frame(&video(1, &[])),
            Err(FrameError::TooShort { .. })
        ));
    }

    #[test]
    fn untouched_frame_is_fortieth() {
        assert_eq!(select_untouched_frame(&video(100, &[])).unwrap(), 39);
        assert_eq!(select_untouched_frame(&video(40, &[])).unwrap(), 39);
        assert!(matches!(
            select_untouched_frame(&video(10, &[])),
            Err(FrameError::TooShort { len: 10, .. })
        ));
    }

    #[test]
    fn pair_extraction() {
        let visual = video(100, &[(57, 120), (20, 30)]);
        let tactile = video(100, &[(57, 5)]);
        let drafts = extract_pair(&visual, &tactile).unwrap();
        assert_eq!(drafts.touched.record.source.visual_frame_index, 57);
        assert_eq!(drafts.touched.record.source.tactile_frame_index, 57);
        assert_eq!(drafts.touched.record.status, RecordStatus::PendingAnnotation);
        assert_eq!(drafts.touched.touch, tactile.frames[57]);
        assert_eq!(drafts.untouched.record.source.visual_frame_index, 39);
        assert_eq!(drafts.untouched.record.caption, UNTOUCHED_CAPTION);
        assert_eq!(drafts.untouched.record.status, RecordStatus::Captioned);
        assert_eq!(drafts.untouched.record.id, "v:39");

        assert!(extract_pair(&video(30, &[]), &video(30, &[])).is_err());
        assert!(matches!(
            extract_pair(&video(50, &[]), &video(49, &[])),
            Err(FrameError::LengthMismatch { .. })
        ));
        let flat_pair = extract_pair(&video(45, &[]), &video(45, &[])).unwrap();
        assert!(flat_pair.touched.zero_signal);
        assert!(!flat_pair.untouched.zero_signal);
    }

    #[test]
    fn mismatched_frames_rejected() {
        assert!(VideoFrames::new("x", vec![flat(4, 4, 0), flat(5, 4, 0)]).is_err());
        assert!(VideoFrames::new("x", vec![]).is_err());
    }
}
