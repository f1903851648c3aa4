use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;
use tlv_annotate::{AnnotateError, AnnotationStore, AppState};
use tlv_core::checkpoint::{Checkpoint, CheckpointError};
use tlv_core::config::{load_kv, ConfigError, Phase, TrainConfig};
use tlv_core::corpus::{Corpus, CorpusError};
use tlv_core::dataset::{self, dataset_stats, DatasetError};
use tlv_core::encoder::ModelConfig;
use tlv_core::eval::{ablation_csv, evaluate, run_ablation_grid, EvalError, EvalTask};
use tlv_core::frames::{
    discover_pairs, draft_image_paths, extract_pair_with, DiffOptions, FrameError, VideoFrames,
};
use tlv_core::synth::{domain_b_shift, domain_shift, generate_corpus, SynthError, WorldSpec};
use tlv_core::train::{finetune_lora, pretrain_foundation, TrainError};
use tlv_vlm::{run_caption_stage, CaptionMode, ChatClient, StageError, VlmConfig, VlmError};

use crate::args::*;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("configuration: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Frames(#[from] FrameError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
    #[error(transparent)]
    Vlm(#[from] VlmError),
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error("{0}")]
    Incomplete(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    fs::write(path, contents).map_err(io(path))
}

/// SHA-256 over the canonical `key = value` rendering.
pub fn digest_of(resolved: &BTreeMap<String, String>) -> String {
    let text: String = resolved.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn announce(digest: &str) {
    println!("config_digest = {digest}");
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::SelectFrames(a) => select_frames(a),
        Command::Annotate(AnnotateCommand::Serve(a)) => serve(a),
        Command::Caption(a) => caption(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = WorldSpec::default();
    if a.domain == Domain::B {
        spec = domain_shift(&spec, domain_b_shift());
    }
    if let Some(path) = &a.spec {
        spec.apply_overrides(&load_kv(path)?)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    }
    let spec_json = serde_json::to_string(&spec).expect("spec serializes");
    let resolved = BTreeMap::from([
        ("domain".to_string(), format!("{:?}", a.domain)),
        ("seed".to_string(), a.seed.to_string()),
        ("spec".to_string(), spec_json),
    ]);
    let digest = digest_of(&resolved);
    announce(&digest);
    let corpus = generate_corpus(&spec, a.seed)?;
    fs::create_dir_all(&a.out).map_err(io(&a.out))?;
    let manifest = corpus.write_to_dir(&a.out)?;
    let sidecar = serde_json::json!({
        "config_digest": digest,
        "domain": format!("{:?}", a.domain),
        "seed": a.seed,
        "spec": spec,
    });
    write_file(
        &a.out.join("synth_config.json"),
        &serde_json::to_string_pretty(&sidecar).expect("json"),
    )?;
    let stats = dataset_stats(&corpus.records());
    println!(
        "wrote {} ({} touched, {} untouched)",
        manifest.display(),
        stats.touched_count,
        stats.untouched_count
    );
    Ok(())
}

fn select_frames(a: SelectArgs) -> Result<()> {
    let resolved = BTreeMap::from([
        ("blur_radius".to_string(), a.blur.to_string()),
        ("input".to_string(), a.input.display().to_string()),
    ]);
    announce(&digest_of(&resolved));
    let opts = DiffOptions {
        blur_radius: a.blur,
    };
    let root = a.out.parent().unwrap_or(Path::new(".")).to_path_buf();
    let pairs = discover_pairs(&a.input)?;
    if pairs.is_empty() {
        return Err(CliError::Usage(format!(
            "{} holds no visual/ + tactile/ video pairs",
            a.input.display()
        )));
    }
    let mut records = Vec::new();
    let mut skipped = 0;
    for (id, dir) in &pairs {
        let drafts = VideoFrames::load_dir(id.as_str(), &dir.join("visual")).and_then(|v| {
            let t = VideoFrames::load_dir(id.as_str(), &dir.join("tactile"))?;
            extract_pair_with(&v, &t, opts)
        });
        let drafts = match drafts {
            Ok(d) => d,
            Err(e) => {
                log::warn!("skipping {id}: {e}");
                skipped += 1;
                continue;
            }
        };
        for draft in [drafts.touched, drafts.untouched] {
            if draft.zero_signal {
                log::warn!("{}: no frame differs from the background; review this pair", draft.record.id);
            }
            let (touch_rel, vision_rel) =
                draft_image_paths(&draft.record.source.video_id, draft.record.source.visual_frame_index);
            for (img, rel) in [(&draft.touch, &touch_rel), (&draft.vision, &vision_rel)] {
                let path = root.join(rel);
                if let Some(d) = path.parent() {
                    fs::create_dir_all(d).map_err(io(d))?;
                }
                img.save(&path)
                    .map_err(|e| CliError::Io {
                        path: path.clone(),
                        source: std::io::Error::other(e.to_string()),
                    })?;
            }
            records.push(draft.record);
        }
    }
    dataset::write_manifest(&records, &a.out)?;
    println!(
        "wrote {} records from {} pairs to {} ({skipped} skipped)",
        records.len(),
        pairs.len() - skipped,
        a.out.display()
    );
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let resolved = BTreeMap::from([
        ("host".to_string(), a.host.clone()),
        ("manifest".to_string(), a.manifest.display().to_string()),
        ("port".to_string(), a.port.to_string()),
        (
            "ui".to_string(),
            a.ui.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        ),
    ]);
    announce(&digest_of(&resolved));
    let store = AnnotationStore::open(&a.manifest)?;
    let p = store.progress();
    let state = AppState::new(store, a.ui.clone());
    let rt = tokio::runtime::Runtime::new().map_err(io(&a.manifest))?;
    let addr = format!("{}:{}", a.host, a.port);
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|source| CliError::Io {
                path: PathBuf::from(&addr),
                source,
            })?;
        let local = listener.local_addr().map_err(io(Path::new(&addr)))?;
        println!(
            "serving http://{local} ({} of {} touched records done)",
            p.completed, p.total
        );
        tlv_annotate::serve(listener, state)
            .await
            .map_err(io(Path::new(&addr)))
    })
}

fn caption(a: CaptionArgs) -> Result<()> {
    let mut resolved = BTreeMap::from([
        ("manifest".to_string(), a.manifest.display().to_string()),
        ("mode".to_string(), if a.template { "template" } else { "vlm" }.to_string()),
    ]);
    if let (Some(e), Some(m)) = (&a.endpoint, &a.model) {
        resolved.insert("endpoint".into(), e.clone());
        resolved.insert("model".into(), m.clone());
        resolved.insert("rpm".into(), a.rpm.to_string());
    }
    let digest = digest_of(&resolved);
    announce(&digest);
    let summary = match (&a.endpoint, &a.model) {
        (Some(endpoint), Some(model)) if !a.template => {
            let mut cfg = VlmConfig::new(endpoint, model);
            cfg.requests_per_minute = a.rpm;
            let mut client =
                ChatClient::new(cfg).map_err(|e| CliError::Usage(e.to_string()))?;
            run_caption_stage(&a.manifest, CaptionMode::Vlm(&mut client))?
        }
        _ => run_caption_stage(&a.manifest, CaptionMode::Template)?,
    };
    let log_path = a
        .log
        .clone()
        .unwrap_or_else(|| a.manifest.with_file_name("captions.jsonl"));
    let mut log = String::new();
    for r in &summary.results {
        let mut v = serde_json::to_value(r).expect("json");
        v["config_digest"] = digest.clone().into();
        log.push_str(&v.to_string());
        log.push('\n');
    }
    write_file(&log_path, &log)?;
    println!(
        "captioned {} records, {} failed, {} skipped; log {}",
        summary.results.len(),
        summary.failures.len(),
        summary.skipped,
        log_path.display()
    );
    for (id, err) in &summary.failures {
        eprintln!("caption failed for {id}: {err}");
    }
    if summary.failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Incomplete(format!(
            "{} records could not be captioned and keep their previous status",
            summary.failures.len()
        )))
    }
}

/// Defaults for `phase`, then the config file, then flags.
fn resolve_config(phase: Phase, o: &Overrides) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::for_phase(phase);
    if let Some(path) = &o.config {
        let mut kv = load_kv(path)?;
        kv.remove("phase");
        cfg.apply(&kv)?;
    }
    let mut flags = BTreeMap::new();
    for item in &o.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{item}`")))?;
        if k.trim() == "phase" {
            return Err(CliError::Usage("use --phase to choose the phase".into()));
        }
        flags.insert(k.trim().to_string(), v.trim().to_string());
    }
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            flags.insert(k.to_string(), v);
        }
    };
    put("seed", o.seed.map(|v| v.to_string()));
    put("steps", o.steps.map(|v| v.to_string()));
    put("batch_size", o.batch_size.map(|v| v.to_string()));
    put("lr", o.lr.map(|v| v.to_string()));
    cfg.apply(&flags)?;
    cfg.phase = phase;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let phase = match a.phase {
        PhaseArg::Foundation => Phase::Foundation,
        PhaseArg::Lora => Phase::Lora,
    };
    let cfg = resolve_config(phase, &a.overrides)?;
    let init = match (phase, &a.init) {
        (Phase::Lora, None) => {
            return Err(CliError::Usage("--phase lora needs --init <foundation checkpoint>".into()))
        }
        (Phase::Foundation, Some(_)) => {
            return Err(CliError::Usage("--init only applies to --phase lora".into()))
        }
        (_, init) => init.clone(),
    };
    announce(&cfg.digest());
    let model_config = ModelConfig::default();
    let (ckpt, report) = match init {
        None => {
            let corpus = Corpus::load_manifest(&a.manifest, &model_config.image)?;
            pretrain_foundation(&corpus, model_config, &cfg)?
        }
        Some(path) => {
            let foundation = Checkpoint::load(&path)?;
            let corpus = Corpus::load_manifest(&a.manifest, &foundation.model.config.image)?;
            finetune_lora(&foundation, &corpus, &cfg)?
        }
    };
    ckpt.save(&a.out)?;
    let csv_path = a.loss_csv.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    write_file(&csv_path, &report.loss_csv())?;
    let last = report.steps.last().map_or(f64::NAN, |s| s.breakdown.total);
    println!(
        "{} phase: {} steps, final loss {last:.4}, mean of last 20 {:.4}",
        phase.as_str(),
        report.steps.len(),
        report.mean_total(20)
    );
    println!(
        "trainable {} of {} parameters (ratio {:.4}); frozen weights unchanged: {}",
        report.trainable_params,
        report.total_params,
        report.trainable_ratio,
        report.freezing_held()
    );
    println!("wrote {} and {}", a.out.display(), csv_path.display());
    Ok(())
}

fn tasks(t: TaskArg) -> Vec<EvalTask> {
    match t {
        TaskArg::Material => vec![EvalTask::Material],
        TaskArg::Hardsoft => vec![EvalTask::Hardness],
        TaskArg::Roughsmooth => vec![EvalTask::Roughness],
        TaskArg::All => EvalTask::ALL.to_vec(),
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let tasks = tasks(a.task);
    let resolved = BTreeMap::from([
        ("checkpoint_config_digest".to_string(), ckpt.config_digest.clone()),
        ("manifest".to_string(), a.manifest.display().to_string()),
        (
            "tasks".to_string(),
            tasks.iter().map(|t| t.name()).collect::<Vec<_>>().join(","),
        ),
    ]);
    let digest = digest_of(&resolved);
    announce(&digest);
    let corpus = Corpus::load_manifest(&a.manifest, &ckpt.model.config.image)?;
    let mut csv = format!("# config_digest {digest}\n");
    for (i, task) in tasks.iter().enumerate() {
        let report = evaluate(&ckpt.model, &corpus, *task, None)?;
        print!("{}", report.pretty());
        let body = report.to_csv();
        csv.push_str(if i == 0 { &body } else { body.split_once('\n').map_or("", |(_, rest)| rest) });
    }
    if let Some(path) = &a.csv {
        write_file(path, &csv)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = resolve_config(Phase::Lora, &a.overrides)?;
    let digest = cfg.digest();
    announce(&digest);
    let foundation = Checkpoint::load(&a.foundation)?;
    let image = &foundation.model.config.image;
    let train = Corpus::load_manifest(&a.train_manifest, image)?;
    let eval = Corpus::load_manifest(&a.eval_manifest, image)?;
    let rows = run_ablation_grid(&foundation, &train, &eval, &cfg)?;
    fs::create_dir_all(&a.out).map_err(io(&a.out))?;
    let csv_path = a.out.join("ablation.csv");
    write_file(&csv_path, &format!("# config_digest {digest}\n{}", ablation_csv(&rows)))?;
    let json_path = a.out.join("ablation.json");
    let json = serde_json::json!({ "config_digest": digest, "rows": rows });
    write_file(&json_path, &serde_json::to_string_pretty(&json).expect("json"))?;
    let mut out = std::io::stdout().lock();
    for r in &rows {
        let accs: Vec<String> = r
            .reports
            .iter()
            .map(|rep| format!("{} {:.3}", rep.task, rep.accuracy))
            .collect();
        let _ = writeln!(out, "{:<9} {}", r.name, accs.join("  "));
    }
    let _ = writeln!(out, "wrote {} and {}", csv_path.display(), json_path.display());
    Ok(())
}
