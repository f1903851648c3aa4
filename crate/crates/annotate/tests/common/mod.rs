#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use tlv_annotate::{AnnotationStore, AppState};
use tlv_core::dataset::{write_manifest, FrameSource, TlvRecord};

pub const WIDTH: u32 = 40;
pub const HEIGHT: u32 = 30;

pub fn source(video: &str, index: usize) -> FrameSource {
    FrameSource {
        video_id: video.into(),
        visual_frame_index: index,
        tactile_frame_index: index,
    }
}

/// Vision image whose pixels encode their coordinates.
pub fn gradient(seed: u8) -> RgbImage {
    RgbImage::from_fn(WIDTH, HEIGHT, |x, y| Rgb([x as u8 * 5, y as u8 * 7, seed]))
}

/// `pending` touched records plus `untouched` untouched ones, images on disk.
pub fn mock_manifest(dir: &Path, pending: usize, untouched: usize) -> PathBuf {
    std::fs::create_dir_all(dir.join("vision")).unwrap();
    std::fs::create_dir_all(dir.join("touch")).unwrap();
    let mut records = Vec::new();
    for i in 0..pending + untouched {
        let video = format!("vid{i}");
        let frame = if i < pending { 12 } else { 39 };
        let vis = PathBuf::from(format!("vision/{video}.png"));
        let tac = PathBuf::from(format!("touch/{video}.png"));
        gradient(i as u8).save(dir.join(&vis)).unwrap();
        gradient(200).save(dir.join(&tac)).unwrap();
        records.push(if i < pending {
            TlvRecord::pending(source(&video, frame), tac, vis)
        } else {
            TlvRecord::untouched(source(&video, frame), tac, vis)
        });
    }
    let path = dir.join("tlv_manifest.jsonl");
    write_manifest(&records, &path).unwrap();
    path
}

pub struct Server {
    pub addr: SocketAddr,
    _rt: tokio::runtime::Runtime,
}

impl Server {
    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }
}

pub fn start(manifest: &Path, ui_dir: Option<PathBuf>) -> Server {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .unwrap();
    let state = AppState::new(AnnotationStore::open(manifest).unwrap(), ui_dir);
    let listener = rt
        .block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))
        .unwrap();
    let addr = listener.local_addr().unwrap();
    rt.spawn(tlv_annotate::serve(listener, state));
    Server { addr, _rt: rt }
}

pub fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into()
}
