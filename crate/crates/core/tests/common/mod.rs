#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use image::{Rgb, RgbImage};
use proptest::prelude::*;
use tlv_core::dataset::{
    record_id, BoundingBox, FrameSource, RecordStatus, TlvRecord, FILTER_NO_INTERACTION,
    FILTER_OCCLUDED,
};

fn word() -> impl Strategy<Value = String> {
    "[a-z]{1,8}"
}

fn text() -> impl Strategy<Value = String> {
    "[A-Za-z ,.;:'\"\\\\/é\u{4e2d}-]{1,60}".prop_filter("non-blank", |s| !s.trim().is_empty())
}

fn source() -> impl Strategy<Value = FrameSource> {
    ("[a-z0-9_]{1,12}", 0usize..5000, 0usize..5000).prop_map(|(v, vi, ti)| FrameSource {
        video_id: v,
        visual_frame_index: vi,
        tactile_frame_index: ti,
    })
}

fn bbox() -> impl Strategy<Value = BoundingBox> {
    (0u32..500, 0u32..500, 1u32..300, 1u32..300)
        .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h))
}

fn labels() -> impl Strategy<Value = BTreeMap<String, String>> {
    proptest::collection::btree_map(word(), word(), 0..3)
}

/// Records that satisfy every record-level invariant.
pub fn record() -> impl Strategy<Value = TlvRecord> {
    let untouched = source().prop_map(|s| {
        TlvRecord::untouched(
            s.clone(),
            PathBuf::from(format!("touch/{}.png", s.video_id)),
            PathBuf::from(format!("vision/{}.png", s.video_id)),
        )
    });
    let touched = (source(), text(), word(), bbox(), 0u8..4, labels(), prop_oneof![
        Just(FILTER_OCCLUDED.to_string()),
        Just(FILTER_NO_INTERACTION.to_string()),
        text()
    ])
    .prop_map(|(s, caption, object, b, status, labels, reason)| {
        let mut r = TlvRecord::pending(
            s.clone(),
            PathBuf::from(format!("touch/{}_{:06}.png", s.video_id, s.visual_frame_index)),
            PathBuf::from(format!("vision/{}_{:06}.png", s.video_id, s.visual_frame_index)),
        );
        r.labels = labels;
        match status {
            0 => {}
            1 => {
                r.status = RecordStatus::Annotated;
                r.bbox = Some(b);
                r.object_name = Some(object);
            }
            2 => {
                r.status = RecordStatus::Captioned;
                r.bbox = Some(b);
                r.object_name = Some(object);
                r.caption = caption;
            }
            _ => {
                r.status = RecordStatus::Filtered;
                r.filter_reason = Some(reason);
            }
        }
        r
    });
    prop_oneof![1 => untouched, 3 => touched]
}

/// Record lists with unique ids.
pub fn records(max: usize) -> impl Strategy<Value = Vec<TlvRecord>> {
    proptest::collection::vec(record(), 0..max).prop_map(|mut v| {
        for (i, r) in v.iter_mut().enumerate() {
            r.source.video_id = format!("{}_{i}", r.source.video_id);
            r.id = record_id(&r.source.video_id, r.source.visual_frame_index);
        }
        v
    })
}

pub fn solid(w: u32, h: u32, c: [u8; 3]) -> RgbImage {
    RgbImage::from_pixel(w, h, Rgb(c))
}

/// Exhaustive-scan reference for the touched frame: the score of every
/// frame is the summed absolute luma change against frame 0 (exact integer
/// arithmetic), and the answer is the first index in 1..N whose score no
/// other candidate exceeds.
pub fn touched_frame_oracle(frames: &[RgbImage]) -> usize {
    let luma = |p: &Rgb<u8>| 299 * p[0] as i64 + 587 * p[1] as i64 + 114 * p[2] as i64;
    let score = |f: &RgbImage| -> i64 {
        f.pixels()
            .zip(frames[0].pixels())
            .map(|(a, b)| (luma(a) - luma(b)).abs())
            .sum()
    };
    let scores: Vec<i64> = frames.iter().map(score).collect();
    (1..frames.len())
        .find(|&i| (1..frames.len()).all(|j| scores[j] <= scores[i]))
        .expect("non-empty candidate set")
}

/// Deterministic video of `len` small frames drawn from a tiny palette so
/// ties are common.
pub fn random_video(seed: u64, len: usize, side: u32) -> Vec<RgbImage> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let palette = [[0u8, 0, 0], [10, 20, 30], [200, 100, 50], [255, 255, 255], [0, 0, 7]];
    let base = RgbImage::from_fn(side, side, |_, _| Rgb(palette[rng.random_range(0..2)]));
    let mut frames = vec![base.clone()];
    for _ in 1..len {
        let mut f = base.clone();
        let changes = rng.random_range(0..4);
        for _ in 0..changes {
            let (x, y) = (rng.random_range(0..side), rng.random_range(0..side));
            f.put_pixel(x, y, Rgb(palette[rng.random_range(0..palette.len())]));
        }
        frames.push(f);
    }
    frames
}
