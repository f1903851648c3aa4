//! Human box annotation: a leased task queue over a manifest, an HTTP JSON
//! API for annotators, and the red-box highlight images consumed by the
//! captioning stage.

pub mod highlight;
pub mod server;
pub mod store;

pub use highlight::{render_highlight, HighlightError, HIGHLIGHT_COLOR, STROKE_WIDTH};
pub use server::{router, serve, AppState};
pub use store::{
    AnnotateError, AnnotationResult, AnnotationStore, AnnotationTask, Decision, Progress,
    TaskResponse, LEASE_TIMEOUT,
};
