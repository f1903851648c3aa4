//! In-memory training corpus: patchified touch/vision images plus tokenized
//! captions.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::Array2;
use thiserror::Error;

use crate::dataset::{self, RecordStatus, TlvRecord};
use crate::encoder::{image_to_array, patchify, ImageEncoderConfig, ModelError};
use crate::synth::SynthCorpus;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error("cannot read image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("record {id}: image is {width}x{height}, encoder expects {expected}x{expected}")]
    ImageSize {
        id: String,
        width: u32,
        height: u32,
        expected: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("corpus has no usable records")]
    Empty,
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub touch: Array2<f64>,
    pub vision: Array2<f64>,
    pub caption: String,
    pub touched: bool,
    pub labels: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub samples: Vec<Sample>,
}

fn to_patches(id: &str, img: &RgbImage, cfg: &ImageEncoderConfig) -> Result<Array2<f64>> {
    let (w, h) = img.dimensions();
    if w as usize != cfg.image_size || h as usize != cfg.image_size {
        return Err(CorpusError::ImageSize {
            id: id.to_string(),
            width: w,
            height: h,
            expected: cfg.image_size,
        });
    }
    Ok(patchify(&image_to_array(img), cfg)?)
}

fn trainable(record: &TlvRecord) -> bool {
    record.status == RecordStatus::Captioned && !record.caption.is_empty()
}

impl Corpus {
    pub fn from_synth(corpus: &SynthCorpus, cfg: &ImageEncoderConfig) -> Result<Self> {
        let samples = corpus
            .samples
            .iter()
            .map(|s| {
                Ok(Sample {
                    id: s.record.id.clone(),
                    touch: to_patches(&s.record.id, &s.touch, cfg)?,
                    vision: to_patches(&s.record.id, &s.vision, cfg)?,
                    caption: s.record.caption.clone(),
                    touched: s.record.touched,
                    labels: s.record.labels.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples })
    }

    /// Loads every captioned record of a manifest; images are resolved
    /// relative to the manifest's directory.
    pub fn load_manifest(path: &Path, cfg: &ImageEncoderConfig) -> Result<Self> {
        let records = dataset::read_manifest(path)?;
        let load = |rel: &Path| -> Result<RgbImage> {
            let p = dataset::resolve_image_path(path, rel);
            image::open(&p)
                .map(|i| i.to_rgb8())
                .map_err(|e| CorpusError::Image {
                    path: p,
                    reason: e.to_string(),
                })
        };
        let mut samples = Vec::new();
        for r in records.iter().filter(|r| trainable(r)) {
            samples.push(Sample {
                id: r.id.clone(),
                touch: to_patches(&r.id, &load(&r.touch_image_path)?, cfg)?,
                vision: to_patches(&r.id, &load(&r.vision_image_path)?, cfg)?,
                caption: r.caption.clone(),
                touched: r.touched,
                labels: r.labels.clone(),
            });
        }
        if samples.is_empty() {
            return Err(CorpusError::Empty);
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn captions(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.caption.as_str())
    }

    pub fn without_untouched(&self) -> Self {
        Self {
            samples: self.samples.iter().filter(|s| s.touched).cloned().collect(),
        }
    }
}
