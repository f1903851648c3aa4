//! Captioning stage: an endpoint-agnostic vision-language-model client with
//! retries and rate limiting, and the runner that captions annotated
//! records in a manifest.

pub mod client;
pub mod stage;

pub use client::{ChatClient, RateLimiter, VlmConfig, VlmError, API_KEY_ENV};
pub use stage::{
    caption_template, caption_touched, run_caption_stage, template_attributes, CaptionMode,
    Captioner, StageError, StageSummary,
};
