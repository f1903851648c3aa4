use std::collections::VecDeque;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use base64::Engine;
use serde_json::{json, Value};
use tlv_core::caption::{template_caption, CaptionAttributes, Provenance, UNTOUCHED_CAPTION};
use tlv_core::dataset::{
    highlight_image_path, read_manifest, write_manifest, BoundingBox, FrameSource, RecordStatus,
    TlvRecord,
};
use tlv_vlm::{
    caption_touched, run_caption_stage, CaptionMode, ChatClient, StageError, VlmConfig, VlmError,
};

#[derive(Default)]
struct Stub {
    replies: Mutex<VecDeque<(u16, Value)>>,
    requests: Mutex<Vec<(Option<String>, Value)>>,
}

async fn chat(
    State(stub): State<Arc<Stub>>,
    headers: HeaderMap,
    Json(body): Json<Value>,
) -> (StatusCode, Json<Value>) {
    let auth = headers
        .get("authorization")
        .map(|v| v.to_str().unwrap().to_string());
    stub.requests.lock().unwrap().push((auth, body));
    let (code, reply) = stub
        .replies
        .lock()
        .unwrap()
        .pop_front()
        .unwrap_or((500, json!({ "error": "script exhausted" })));
    (StatusCode::from_u16(code).unwrap(), Json(reply))
}

struct Endpoint {
    stub: Arc<Stub>,
    addr: SocketAddr,
    _rt: tokio::runtime::Runtime,
}

fn endpoint(replies: Vec<(u16, Value)>) -> Endpoint {
    let stub = Arc::new(Stub {
        replies: Mutex::new(replies.into()),
        ..Stub::default()
    });
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(1)
        .enable_all()
        .build()
        .unwrap();
    let listener = rt
        .block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))
        .unwrap();
    let addr = listener.local_addr().unwrap();
    let app = Router::new()
        .route("/v1/chat/completions", post(chat))
        .with_state(stub.clone());
    rt.spawn(async move { axum::serve(listener, app).await });
    Endpoint {
        stub,
        addr,
        _rt: rt,
    }
}

fn ok(text: &str) -> (u16, Value) {
    (
        200,
        json!({ "choices": [{ "index": 0, "message": { "role": "assistant", "content": text } }] }),
    )
}

fn config(ep: &Endpoint) -> VlmConfig {
    VlmConfig {
        api_key: Some("sk-test".into()),
        initial_backoff: Duration::from_millis(20),
        requests_per_minute: 6000,
        ..VlmConfig::new(&format!("http://{}/v1/chat/completions", ep.addr), "stub-vision")
    }
}

fn source(v: &str, i: usize) -> FrameSource {
    FrameSource {
        video_id: v.into(),
        visual_frame_index: i,
        tactile_frame_index: i,
    }
}

fn annotated(v: &str) -> TlvRecord {
    let mut r = TlvRecord::pending(source(v, 12), "touch/a.png".into(), "vision/a.png".into());
    r.bbox = Some(BoundingBox::new(2, 2, 10, 10));
    r.object_name = Some("ball".into());
    r.status = RecordStatus::Annotated;
    r
}

/// Manifest with the given records and a highlight PNG for each touched one.
fn dataset(dir: &Path, records: &[TlvRecord]) -> PathBuf {
    std::fs::create_dir_all(dir.join("highlight")).unwrap();
    for r in records.iter().filter(|r| r.touched) {
        let img = image::RgbImage::from_pixel(16, 16, image::Rgb([255, 0, 0]));
        img.save(dir.join(highlight_image_path(&r.id))).unwrap();
    }
    let m = dir.join("tlv_manifest.jsonl");
    write_manifest(records, &m).unwrap();
    m
}

#[test]
fn stub_caption_marks_record_captioned() {
    let ep = endpoint(vec![ok("  The red box encloses a soft rubber ball.\nIt feels smooth.  ")]);
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), &[annotated("v1")]);
    let mut client = ChatClient::new(config(&ep)).unwrap();
    let mut r = read_manifest(&m).unwrap().remove(0);
    let res = caption_touched(&mut r, &m, &mut client).unwrap();
    assert_eq!(res.provenance, Provenance::Vlm);
    assert_eq!(res.model.as_deref(), Some("stub-vision"));
    assert_eq!(res.caption, "The red box encloses a soft rubber ball. It feels smooth.");
    assert_eq!(r.status, RecordStatus::Captioned);

    let reqs = ep.stub.requests.lock().unwrap();
    assert_eq!(reqs.len(), 1);
    let (auth, body) = &reqs[0];
    assert_eq!(auth.as_deref(), Some("Bearer sk-test"));
    assert_eq!(body["model"], "stub-vision");
    let content = &body["messages"][0]["content"];
    assert!(content[0]["text"].as_str().unwrap().contains("ball"));
    let url = content[1]["image_url"]["url"].as_str().unwrap();
    let b64 = url.strip_prefix("data:image/png;base64,").unwrap();
    let sent = base64::engine::general_purpose::STANDARD.decode(b64).unwrap();
    let on_disk = std::fs::read(dir.path().join(highlight_image_path("v1:12"))).unwrap();
    assert_eq!(sent, on_disk);
}

#[test]
fn three_failures_leave_record_annotated() {
    let fail = (503, json!({ "error": "busy" }));
    let ep = endpoint(vec![fail.clone(), fail.clone(), fail]);
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), &[annotated("v1")]);
    let before = std::fs::read(&m).unwrap();
    let mut client = ChatClient::new(config(&ep)).unwrap();
    let t0 = Instant::now();
    let summary = run_caption_stage(&m, CaptionMode::Vlm(&mut client)).unwrap();
    assert!(t0.elapsed() >= Duration::from_millis(60), "backoff of 20 + 40 ms");
    assert_eq!(ep.stub.requests.lock().unwrap().len(), 3);
    assert_eq!(summary.failures.len(), 1);
    assert!(summary.failures[0].1.contains("3 attempts"), "{:?}", summary.failures);
    assert!(summary.results.is_empty());
    assert_eq!(std::fs::read(&m).unwrap(), before);
    assert_eq!(read_manifest(&m).unwrap()[0].status, RecordStatus::Annotated);
}

#[test]
fn transient_failures_then_success() {
    let ep = endpoint(vec![
        (429, json!({ "error": "slow down" })),
        ok("   "),
        ok("A hard wooden block."),
    ]);
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), &[annotated("v1")]);
    let mut client = ChatClient::new(config(&ep)).unwrap();
    let summary = run_caption_stage(&m, CaptionMode::Vlm(&mut client)).unwrap();
    assert_eq!(ep.stub.requests.lock().unwrap().len(), 3);
    assert_eq!(summary.results.len(), 1);
    let r = read_manifest(&m).unwrap().remove(0);
    assert_eq!((r.status, r.caption.as_str()), (RecordStatus::Captioned, "A hard wooden block."));
}

#[test]
fn auth_failure_is_not_retried() {
    let ep = endpoint(vec![(401, json!({ "error": "bad key" })), ok("never")]);
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), &[annotated("v1")]);
    let mut client = ChatClient::new(config(&ep)).unwrap();
    let mut r = read_manifest(&m).unwrap().remove(0);
    let err = caption_touched(&mut r, &m, &mut client).unwrap_err();
    assert!(matches!(err, StageError::Vlm { source: VlmError::Auth(401), .. }), "{err}");
    assert_eq!(ep.stub.requests.lock().unwrap().len(), 1);
    assert_eq!(r.status, RecordStatus::Annotated);
}

#[test]
fn untouched_and_unannotated_records_are_rejected() {
    let ep = endpoint(vec![]);
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), &[]);
    let mut client = ChatClient::new(config(&ep)).unwrap();
    let mut u = TlvRecord::untouched(source("u", 39), "t".into(), "v".into());
    assert!(matches!(
        caption_touched(&mut u, &m, &mut client),
        Err(StageError::Untouched(_))
    ));
    let mut p = TlvRecord::pending(source("p", 3), "t".into(), "v".into());
    assert!(matches!(
        caption_touched(&mut p, &m, &mut client),
        Err(StageError::WrongStatus { .. })
    ));
    assert!(ep.stub.requests.lock().unwrap().is_empty());
}

#[test]
fn template_mode_and_untouched_records() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = annotated("v1");
    for (k, v) in [("location", "top surface"), ("material", "rubber"), ("roughsmooth", "smooth"), ("hardsoft", "soft")] {
        a.labels.insert(k.into(), v.into());
    }
    let b = annotated("v2");
    let u = TlvRecord::untouched(source("u", 39), "t".into(), "v".into());
    let mut filtered = TlvRecord::pending(source("f", 9), "t".into(), "v".into());
    filtered.status = RecordStatus::Filtered;
    filtered.filter_reason = Some("occluded".into());
    let m = dataset(dir.path(), &[a, b, u, filtered]);

    let summary = run_caption_stage(&m, CaptionMode::Template).unwrap();
    assert_eq!(summary.skipped, 1);
    assert_eq!(summary.failures.len(), 1, "v2 has no attribute labels");
    let out = read_manifest(&m).unwrap();
    let expected = template_caption(&CaptionAttributes {
        object_name: "ball".into(),
        location: "top surface".into(),
        material: "rubber".into(),
        texture: "smooth".into(),
        hardness: "soft".into(),
    })
    .unwrap();
    assert_eq!(out[0].caption, expected);
    assert_eq!(out[0].status, RecordStatus::Captioned);
    assert_eq!(out[1].status, RecordStatus::Annotated);
    assert_eq!(out[2].caption, UNTOUCHED_CAPTION);
    let provenances: Vec<_> = summary.results.iter().map(|r| r.provenance).collect();
    assert_eq!(provenances, [Provenance::Template, Provenance::FixedUntouched]);
}

#[test]
fn rate_limit_spaces_requests() {
    let ep = endpoint(vec![ok("one"), ok("two"), ok("three")]);
    let mut cfg = config(&ep);
    cfg.requests_per_minute = 600;
    let mut client = ChatClient::new(cfg).unwrap();
    let t0 = Instant::now();
    for _ in 0..3 {
        client.complete("p", &[0]).unwrap();
    }
    assert!(t0.elapsed() >= Duration::from_millis(200));
}
