//! Seeded synthetic touch/vision/caption corpora in shiftable render domains.
//!
//! Each material class owns disjoint ranges of value-noise frequency plus a
//! contrast and luminance band. A touch image is the grayscale texture
//! replicated to RGB; the vision image is the same texture tinted with the
//! class hue. Domains differ only in their [`RenderShift`]: a global hue
//! rotation of the vision render, the noise seed family, and offsets on
//! contrast and luminance.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::caption::{template_caption, CaptionAttributes};
use crate::dataset::{
    self, BoundingBox, FrameSource, RecordStatus, TlvRecord, MANIFEST_FILE, UNTOUCHED_CAPTION,
};
use crate::frames::UNTOUCHED_FRAME_INDEX;

pub const TASK_MATERIAL: &str = "material";
pub const TASK_HARDNESS: &str = "hardsoft";
pub const TASK_ROUGHNESS: &str = "roughsmooth";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error("failed to write {path}: {reason}")]
    Write { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn disjoint(&self, other: &Range) -> bool {
        self.hi < other.lo || other.hi < self.lo
    }

    fn shifted(&self, by: f64) -> Range {
        Range::new(self.lo + by, self.hi + by)
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialClass {
    pub name: String,
    pub hardness: String,
    pub roughness: String,
    /// Noise cells across the image.
    pub frequency: Range,
    /// Peak deviation from the base luminance.
    pub contrast: Range,
    pub luminance: Range,
    /// Tint of the vision render, degrees.
    pub hue: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderShift {
    pub hue_rotation: f64,
    pub noise_seed_family: u64,
    pub contrast_offset: f64,
    pub luminance_offset: f64,
}

impl Default for RenderShift {
    fn default() -> Self {
        Self {
            hue_rotation: 0.0,
            noise_seed_family: 0,
            contrast_offset: 0.0,
            luminance_offset: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub classes: Vec<MaterialClass>,
    pub image_size: u32,
    /// Touched samples per class.
    pub samples_per_class: usize,
    /// Fraction of all records that are untouched.
    pub untouched_fraction: f64,
    pub objects: Vec<String>,
    pub locations: Vec<String>,
    pub shift: RenderShift,
}

fn class(
    name: &str,
    hardness: &str,
    roughness: &str,
    frequency: Range,
    contrast: Range,
    luminance: Range,
    hue: f64,
) -> MaterialClass {
    MaterialClass {
        name: name.into(),
        hardness: hardness.into(),
        roughness: roughness.into(),
        frequency,
        contrast,
        luminance,
        hue,
    }
}

impl Default for WorldSpec {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        Self {
            classes: vec![
                class("metal", "hard", "smooth", Range::new(1.5, 2.5), Range::new(0.08, 0.14), Range::new(0.70, 0.78), 210.0),
                class("wood", "hard", "rough", Range::new(3.5, 4.5), Range::new(0.26, 0.32), Range::new(0.52, 0.60), 30.0),
                class("fabric", "soft", "rough", Range::new(9.0, 11.0), Range::new(0.30, 0.36), Range::new(0.38, 0.46), 330.0),
                class("rubber", "soft", "smooth", Range::new(5.5, 6.5), Range::new(0.14, 0.20), Range::new(0.22, 0.30), 120.0),
            ],
            image_size: 32,
            samples_per_class: 64,
            untouched_fraction: 0.2,
            objects: s(&["block", "ball", "cup", "box", "handle", "panel", "bottle", "plate"]),
            locations: s(&["top surface", "side", "edge", "corner", "center", "bottom"]),
            shift: RenderShift::default(),
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.classes.len() < 2 {
            return bad("need at least two material classes".into());
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be positive".into());
        }
        if !(0.0..1.0).contains(&self.untouched_fraction) {
            return bad(format!(
                "untouched_fraction {} must be in [0, 1)",
                self.untouched_fraction
            ));
        }
        if self.image_size < 4 {
            return bad("image_size too small".into());
        }
        if self.objects.is_empty() || self.locations.is_empty() {
            return bad("objects and locations must be non-empty".into());
        }
        let mut names: Vec<_> = self.classes.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.classes.len() {
            return bad("duplicate material names".into());
        }
        for c in &self.classes {
            if c.frequency.lo <= 0.0 || c.frequency.hi < c.frequency.lo {
                return bad(format!("class {}: bad frequency range", c.name));
            }
        }
        Ok(())
    }

    /// Effective per-class ranges after the render shift.
    pub fn effective_ranges(&self, c: &MaterialClass) -> (Range, Range, Range) {
        (
            c.frequency,
            c.contrast.shifted(self.shift.contrast_offset),
            c.luminance.shifted(self.shift.luminance_offset),
        )
    }

    /// Every pair of classes differs in at least one texture parameter range.
    pub fn classes_separable(&self) -> bool {
        for (i, a) in self.classes.iter().enumerate() {
            for b in &self.classes[i + 1..] {
                let (fa, ca, la) = self.effective_ranges(a);
                let (fb, cb, lb) = self.effective_ranges(b);
                if !(fa.disjoint(&fb) || ca.disjoint(&cb) || la.disjoint(&lb)) {
                    return false;
                }
            }
        }
        true
    }

    pub fn touched_count(&self) -> usize {
        self.classes.len() * self.samples_per_class
    }

    pub fn untouched_count(&self) -> usize {
        let t = self.touched_count() as f64;
        (t * self.untouched_fraction / (1.0 - self.untouched_fraction)).round() as usize
    }

    pub fn material_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    /// Ordered labels for a zero-shot task, or `None` for unknown tasks.
    pub fn task_labels(&self, task: &str) -> Option<Vec<String>> {
        let mut labels: Vec<String> = match task {
            TASK_MATERIAL => return Some(self.material_names()),
            TASK_HARDNESS => self.classes.iter().map(|c| c.hardness.clone()).collect(),
            TASK_ROUGHNESS => self.classes.iter().map(|c| c.roughness.clone()).collect(),
            _ => return None,
        };
        labels.sort();
        labels.dedup();
        Some(labels)
    }

    /// Reads overrides from a flat `key = value` map.
    pub fn apply_overrides(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        let num = |k: &str, v: &str| {
            v.parse::<f64>()
                .map_err(|_| SynthError::InvalidSpec(format!("{k}: `{v}` is not a number")))
        };
        for (k, v) in kv {
            match k.as_str() {
                "samples_per_class" => {
                    self.samples_per_class = v.parse().map_err(|_| {
                        SynthError::InvalidSpec(format!("{k}: `{v}` is not an integer"))
                    })?
                }
                "untouched_fraction" => self.untouched_fraction = num(k, v)?,
                "image_size" => self.image_size = num(k, v)? as u32,
                "hue_rotation" => self.shift.hue_rotation = num(k, v)?,
                "contrast_offset" => self.shift.contrast_offset = num(k, v)?,
                "luminance_offset" => self.shift.luminance_offset = num(k, v)?,
                "noise_seed_family" => {
                    self.shift.noise_seed_family = v.parse().map_err(|_| {
                        SynthError::InvalidSpec(format!("{k}: `{v}` is not an integer"))
                    })?
                }
                other => {
                    return Err(SynthError::InvalidSpec(format!("unknown key `{other}`")))
                }
            }
        }
        self.validate()
    }
}

/// Render shift of the held-out evaluation domain.
pub fn domain_b_shift() -> RenderShift {
    RenderShift {
        hue_rotation: 40.0,
        noise_seed_family: 1,
        contrast_offset: 0.06,
        luminance_offset: -0.18,
    }
}

/// The same world under different render parameters; class semantics are
/// untouched.
pub fn domain_shift(spec: &WorldSpec, shift: RenderShift) -> WorldSpec {
    WorldSpec {
        shift,
        ..spec.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    pub frequency: f64,
    pub contrast: f64,
    pub luminance: f64,
    pub noise_seed: u64,
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub record: TlvRecord,
    pub touch: RgbImage,
    pub vision: RgbImage,
    /// `None` for untouched samples.
    pub material: Option<usize>,
    pub params: TextureParams,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub spec: WorldSpec,
    pub seed: u64,
    pub samples: Vec<SynthSample>,
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Bilinear value noise in `[0, 1]` with `frequency` cells across.
fn value_noise(size: u32, frequency: f64, seed: u64) -> Vec<f64> {
    let cells = frequency.ceil() as usize + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1))
        .map(|_| rng.random::<f64>())
        .collect();
    let at = |x: usize, y: usize| lattice[y * (cells + 1) + x];
    let mut out = Vec::with_capacity((size * size) as usize);
    for py in 0..size {
        for px in 0..size {
            let fx = (px as f64 + 0.5) / size as f64 * frequency;
            let fy = (py as f64 + 0.5) / size as f64 * frequency;
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (tx, ty) = (smoothstep(fx.fract()), smoothstep(fy.fract()));
            let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1, y0) * tx;
            let bottom = at(x0, y0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// HSV to RGB with `h` in degrees.
fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn render(size: u32, params: &TextureParams, hue: f64) -> (RgbImage, RgbImage) {
    let noise = value_noise(size, params.frequency, params.noise_seed);
    let mut touch = RgbImage::new(size, size);
    let mut vision = RgbImage::new(size, size);
    for (i, n) in noise.iter().enumerate() {
        let (x, y) = (i as u32 % size, i as u32 / size);
        let v = (params.luminance + params.contrast * (2.0 * n - 1.0)).clamp(0.0, 1.0);
        let g = to_u8(v);
        touch.put_pixel(x, y, Rgb([g, g, g]));
        let c = hsv(hue, 0.55, v);
        vision.put_pixel(x, y, Rgb([to_u8(c[0]), to_u8(c[1]), to_u8(c[2])]));
    }
    (touch, vision)
}

/// Half of the captions name every attribute; the rest name either the
/// material or the feel, so no single attribute word stands in for the others.
fn synth_caption(a: &CaptionAttributes, form: u32) -> String {
    match form {
        2 => format!("This {} is made of {}.", a.object_name, a.material),
        3 => format!("This {} feels {} and {}.", a.object_name, a.texture, a.hardness),
        _ => template_caption(a).expect("spec attributes are non-empty"),
    }
}

fn domain_tag(spec: &WorldSpec) -> String {
    format!("f{}", spec.shift.noise_seed_family)
}

/// Deterministic corpus for `(spec, seed)`: `samples_per_class` touched
/// samples per material followed by the untouched samples.
pub fn generate_corpus(spec: &WorldSpec, seed: u64) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ spec.shift.noise_seed_family.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let size = spec.image_size;
    let tag = domain_tag(spec);
    let bbox = BoundingBox::new(size / 8, size / 8, size - size / 8, size - size / 8);
    let mut samples = Vec::with_capacity(spec.touched_count() + spec.untouched_count());
    for (ci, class) in spec.classes.iter().enumerate() {
        let (freq, contrast, luminance) = spec.effective_ranges(class);
        for _ in 0..spec.samples_per_class {
            let params = TextureParams {
                frequency: freq.sample(&mut rng),
                contrast: contrast.sample(&mut rng).max(0.0),
                luminance: luminance.sample(&mut rng),
                noise_seed: rng.next_u64(),
            };
            let object = &spec.objects[rng.random_range(0..spec.objects.len())];
            let location = &spec.locations[rng.random_range(0..spec.locations.len())];
            let (touch, vision) = render(size, &params, class.hue + spec.shift.hue_rotation);
            let video_id = format!("synth-{tag}-s{seed}-{:05}", samples.len());
            let source = FrameSource {
                video_id,
                visual_frame_index: 0,
                tactile_frame_index: 0,
            };
            let id = dataset::record_id(&source.video_id, 0);
            let attrs = CaptionAttributes {
                object_name: object.clone(),
                location: location.clone(),
                material: class.name.clone(),
                texture: class.roughness.clone(),
                hardness: class.hardness.clone(),
            };
            let caption = synth_caption(&attrs, rng.random_range(0..4));
            let labels = BTreeMap::from([
                (TASK_MATERIAL.to_string(), class.name.clone()),
                (TASK_HARDNESS.to_string(), class.hardness.clone()),
                (TASK_ROUGHNESS.to_string(), class.roughness.clone()),
            ]);
            let record = TlvRecord {
                touch_image_path: PathBuf::from("touch").join(format!("{}.png", source.video_id)),
                vision_image_path: PathBuf::from("vision").join(format!("{}.png", source.video_id)),
                id,
                caption,
                touched: true,
                object_name: Some(object.clone()),
                bbox: Some(bbox),
                status: RecordStatus::Captioned,
                filter_reason: None,
                source,
                labels,
            };
            samples.push(SynthSample {
                record,
                touch,
                vision,
                material: Some(ci),
                params,
            });
        }
    }
    for _ in 0..spec.untouched_count() {
        let params = TextureParams {
            frequency: Range::new(2.0, 4.0).sample(&mut rng),
            contrast: Range::new(0.0, 0.02).sample(&mut rng),
            luminance: Range::new(0.45, 0.55).sample(&mut rng),
            noise_seed: rng.next_u64(),
        };
        let (touch, vision) = render(size, &params, 0.0);
        let video_id = format!("synth-{tag}-s{seed}-{:05}", samples.len());
        let source = FrameSource {
            video_id: video_id.clone(),
            visual_frame_index: UNTOUCHED_FRAME_INDEX,
            tactile_frame_index: UNTOUCHED_FRAME_INDEX,
        };
        let record = TlvRecord::untouched(
            source,
            PathBuf::from("touch").join(format!("{video_id}.png")),
            PathBuf::from("vision").join(format!("{video_id}.png")),
        );
        debug_assert_eq!(record.caption, UNTOUCHED_CAPTION);
        samples.push(SynthSample {
            record,
            touch,
            vision,
            material: None,
            params,
        });
    }
    Ok(SynthCorpus {
        spec: spec.clone(),
        seed,
        samples,
    })
}

impl SynthCorpus {
    pub fn records(&self) -> Vec<TlvRecord> {
        self.samples.iter().map(|s| s.record.clone()).collect()
    }

    /// Touched samples only.
    pub fn touched(&self) -> impl Iterator<Item = &SynthSample> {
        self.samples.iter().filter(|s| s.record.touched)
    }

    /// Writes images and `tlv_manifest.jsonl` under `dir`; returns the
    /// manifest path.
    pub fn write_to_dir(&self, dir: &Path) -> Result<PathBuf> {
        let write_err = |path: &Path, reason: String| SynthError::Write {
            path: path.to_path_buf(),
            reason,
        };
        for sub in ["touch", "vision"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| write_err(&p, e.to_string()))?;
        }
        for s in &self.samples {
            for (img, rel) in [
                (&s.touch, &s.record.touch_image_path),
                (&s.vision, &s.record.vision_image_path),
            ] {
                let path = dir.join(rel);
                img.save(&path).map_err(|e| write_err(&path, e.to_string()))?;
            }
        }
        let manifest = dir.join(MANIFEST_FILE);
        dataset::write_manifest(&self.records(), &manifest)?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldSpec {
        WorldSpec {
            samples_per_class: 32,
            ..WorldSpec::default()
        }
    }

    #[test]
    fn counts() {
        let c = generate_corpus(&small(), 1).unwrap();
        assert_eq!(c.touched().count(), 128);
        assert_eq!(c.samples.len() - 128, 32);
        for m in 0..4 {
            assert_eq!(c.samples.iter().filter(|s| s.material == Some(m)).count(), 32);
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_corpus(&small(), 7).unwrap();
        let b = generate_corpus(&small(), 7).unwrap();
        assert_eq!(a.records(), b.records());
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.touch, y.touch);
            assert_eq!(x.vision, y.vision);
        }
        let c = generate_corpus(&small(), 8).unwrap();
        assert_ne!(a.samples[0].touch, c.samples[0].touch);
    }

    #[test]
    fn captions_carry_class_words() {
        let c = generate_corpus(&small(), 2).unwrap();
        let (mut full, mut material_only, mut feel_only) = (0, 0, 0);
        for s in c.touched() {
            let class = &c.spec.classes[s.material.unwrap()];
            let cap = &s.record.caption;
            let material = cap.contains(class.name.as_str());
            let feel = cap.contains(class.hardness.as_str()) && cap.contains(class.roughness.as_str());
            match (material, feel) {
                (true, true) => full += 1,
                (true, false) => material_only += 1,
                (false, true) => feel_only += 1,
                _ => panic!("caption names no class attribute: {cap}"),
            }
        }
        assert!(full > 0 && material_only > 0 && feel_only > 0);
        for s in c.samples.iter().filter(|s| !s.record.touched) {
            assert_eq!(s.record.caption, UNTOUCHED_CAPTION);
        }
    }

    #[test]
    fn touch_is_grayscale() {
        let c = generate_corpus(&small(), 3).unwrap();
        assert!(c.samples[0].touch.pixels().all(|p| p[0] == p[1] && p[1] == p[2]));
        assert!(c.samples[0].vision.pixels().any(|p| p[0] != p[1] || p[1] != p[2]));
    }

    #[test]
    fn shift_semantics() {
        let a = small();
        assert_eq!(domain_shift(&a, RenderShift::default()), a);
        let b = domain_shift(&a, RenderShift { hue_rotation: 40.0, ..RenderShift::default() });
        let ca = generate_corpus(&a, 5).unwrap();
        let cb = generate_corpus(&b, 5).unwrap();
        assert_eq!(ca.samples[0].touch, cb.samples[0].touch);
        assert_ne!(ca.samples[0].vision, cb.samples[0].vision);
        for (x, y) in ca.samples.iter().zip(&cb.samples) {
            assert_eq!(x.record.labels, y.record.labels);
        }
        assert_eq!(a.task_labels(TASK_HARDNESS), b.task_labels(TASK_HARDNESS));
    }

    #[test]
    fn domain_b_remains_separable() {
        let b = domain_shift(&WorldSpec::default(), domain_b_shift());
        assert!(b.classes_separable());
        assert!(WorldSpec::default().classes_separable());
    }

    #[test]
    fn invalid_specs() {
        let mut s = small();
        s.untouched_fraction = 1.0;
        assert!(generate_corpus(&s, 0).is_err());
        let mut s = small();
        s.samples_per_class = 0;
        assert!(generate_corpus(&s, 0).is_err());
    }

    #[test]
    fn task_label_sets() {
        let s = WorldSpec::default();
        assert_eq!(s.task_labels(TASK_HARDNESS).unwrap(), vec!["hard", "soft"]);
        assert_eq!(s.task_labels(TASK_ROUGHNESS).unwrap(), vec!["rough", "smooth"]);
        assert_eq!(s.task_labels(TASK_MATERIAL).unwrap().len(), 4);
        assert!(s.task_labels("color").is_none());
    }
}
