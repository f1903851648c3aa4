//! Touch-language-vision dataset construction and tri-modal contrastive
//! alignment with low-rank adapters.
//!
//! The crate covers the whole offline pipeline: frame selection from
//! synchronized videos, the record/manifest layer, caption prompts, desk-scale
//! encoders with LoRA, the joint InfoNCE objective, training, zero-shot
//! evaluation and a synthetic corpus generator.

pub mod caption;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod dataset;
pub mod encoder;
pub mod eval;
pub mod frames;
pub mod graph;
pub mod lora;
pub mod loss;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tokenizer;
pub mod train;
