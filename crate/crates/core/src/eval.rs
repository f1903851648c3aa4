//! Prompt-based zero-shot tactile classification and the ablation grid.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::Serialize;
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::corpus::{Corpus, Sample};
use crate::encoder::{ModelError, TlvModel, Tower};
use crate::loss::LossBreakdown;
use crate::synth::{TASK_HARDNESS, TASK_MATERIAL, TASK_ROUGHNESS};
use crate::train::{finetune_lora, TrainError};

const IMAGE_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("label list is empty")]
    EmptyLabels,
    #[error("a task needs at least two classes, got {0}")]
    TooFewClasses(usize),
    #[error("duplicate class label `{0}`")]
    DuplicateLabel(String),
    #[error("record {id} has no `{task}` label")]
    MissingLabel { id: String, task: String },
    #[error("record {id}: label `{label}` is not one of the task classes")]
    UnknownLabel { id: String, label: String },
    #[error("embedding has dimension {got}, class embeddings have {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("no touched records to evaluate")]
    NoSamples,
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum EvalTask {
    Material,
    Hardness,
    Roughness,
}

impl EvalTask {
    pub const ALL: [EvalTask; 3] = [EvalTask::Material, EvalTask::Hardness, EvalTask::Roughness];

    pub fn name(&self) -> &'static str {
        match self {
            EvalTask::Material => TASK_MATERIAL,
            EvalTask::Hardness => TASK_HARDNESS,
            EvalTask::Roughness => TASK_ROUGHNESS,
        }
    }

    pub fn template(&self) -> &'static str {
        match self {
            EvalTask::Material => "This is made of {label}.",
            EvalTask::Hardness | EvalTask::Roughness => "This feels {label}.",
        }
    }
}

impl FromStr for EvalTask {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        EvalTask::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| EvalError::UnknownTask(s.to_string()))
    }
}

/// Template words, so prompts do not fall back to the unknown token.
pub fn prompt_vocabulary() -> Vec<String> {
    EvalTask::ALL
        .iter()
        .map(|t| t.template().replace("{label}", ""))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPromptSet {
    pub task: String,
    pub labels: Vec<String>,
    pub templates: Vec<String>,
    /// One unit-norm row per label.
    pub embeddings: Array2<f64>,
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        v / n
    } else {
        v
    }
}

/// Class embeddings from the text tower: the mean over templates of each
/// filled-in prompt's embedding, re-normalized.
pub fn build_class_prompts_with(
    model: &TlvModel,
    task: &str,
    labels: &[String],
    templates: &[&str],
) -> Result<ClassPromptSet> {
    if labels.is_empty() {
        return Err(EvalError::EmptyLabels);
    }
    if labels.len() < 2 {
        return Err(EvalError::TooFewClasses(labels.len()));
    }
    let mut seen = BTreeSet::new();
    for l in labels {
        if !seen.insert(l) {
            return Err(EvalError::DuplicateLabel(l.clone()));
        }
    }
    assert!(!templates.is_empty(), "at least one template");
    let d = model.config.d_emb;
    let mut embeddings = Array2::zeros((labels.len(), d));
    for (i, label) in labels.iter().enumerate() {
        let toks: Vec<Vec<usize>> = templates
            .iter()
            .map(|t| model.vocab.tokenize(&t.replace("{label}", label)))
            .collect();
        let refs: Vec<&[usize]> = toks.iter().map(|t| t.as_slice()).collect();
        let e = model.encode_token_batch(&refs)?;
        let mean = e.mean_axis(Axis(0)).expect("non-empty");
        embeddings.row_mut(i).assign(&unit(mean));
    }
    Ok(ClassPromptSet {
        task: task.to_string(),
        labels: labels.to_vec(),
        templates: templates.iter().map(|t| t.to_string()).collect(),
        embeddings,
    })
}

pub fn build_class_prompts(
    model: &TlvModel,
    task: EvalTask,
    labels: &[String],
) -> Result<ClassPromptSet> {
    build_class_prompts_with(model, task.name(), labels, &[task.template()])
}

/// Index of the most similar class; ties go to the lowest index.
pub fn classify(embedding: ArrayView1<f64>, prompts: &ClassPromptSet) -> Result<usize> {
    let expected = prompts.embeddings.ncols();
    if embedding.len() != expected {
        return Err(EvalError::Dimension {
            expected,
            got: embedding.len(),
        });
    }
    let scores = prompts.embeddings.dot(&embedding);
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub task: String,
    pub labels: Vec<String>,
    pub per_class_correct: Vec<usize>,
    pub per_class_total: Vec<usize>,
    pub accuracy: f64,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn from_predictions(
        task: &str,
        labels: Vec<String>,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Self {
        let n = labels.len();
        let mut confusion = vec![vec![0; n]; n];
        for (truth, pred) in pairs {
            confusion[truth][pred] += 1;
        }
        let per_class_total: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
        let per_class_correct: Vec<usize> = (0..n).map(|i| confusion[i][i]).collect();
        let total: usize = per_class_total.iter().sum();
        let correct: usize = per_class_correct.iter().sum();
        Self {
            task: task.to_string(),
            labels,
            per_class_correct,
            per_class_total,
            accuracy: if total == 0 {
                0.0
            } else {
                correct as f64 / total as f64
            },
            confusion,
        }
    }

    pub fn total(&self) -> usize {
        self.per_class_total.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,label,correct,total,accuracy\n");
        for (i, l) in self.labels.iter().enumerate() {
            let (c, t) = (self.per_class_correct[i], self.per_class_total[i]);
            let acc = if t == 0 { 0.0 } else { c as f64 / t as f64 };
            out.push_str(&format!("{},{},{},{},{:.6}\n", self.task, l, c, t, acc));
        }
        out.push_str(&format!(
            "{},ALL,{},{},{:.6}\n",
            self.task,
            self.per_class_correct.iter().sum::<usize>(),
            self.total(),
            self.accuracy
        ));
        out
    }

    pub fn pretty(&self) -> String {
        let mut out = format!(
            "task {}: accuracy {:.4} ({}/{})\n",
            self.task,
            self.accuracy,
            self.per_class_correct.iter().sum::<usize>(),
            self.total()
        );
        let w = self.labels.iter().map(|l| l.len()).max().unwrap_or(0).max(5);
        out.push_str(&format!("{:>w$} |", "truth"));
        for l in &self.labels {
            out.push_str(&format!(" {l:>w$}"));
        }
        out.push('\n');
        for (i, l) in self.labels.iter().enumerate() {
            out.push_str(&format!("{l:>w$} |"));
            for c in &self.confusion[i] {
                out.push_str(&format!(" {c:>w$}"));
            }
            out.push('\n');
        }
        out
    }
}

fn eval_samples(corpus: &Corpus) -> Vec<&Sample> {
    corpus.samples.iter().filter(|s| s.touched).collect()
}

/// Sorted distinct labels of `task` over the touched records.
pub fn default_labels(corpus: &Corpus, task: EvalTask) -> Result<Vec<String>> {
    let mut set = BTreeSet::new();
    for s in eval_samples(corpus) {
        let l = s.labels.get(task.name()).ok_or_else(|| EvalError::MissingLabel {
            id: s.id.clone(),
            task: task.name().to_string(),
        })?;
        set.insert(l.clone());
    }
    Ok(set.into_iter().collect())
}

/// Unit-norm touch embeddings of the touched records, in corpus order.
pub fn touch_embeddings(model: &TlvModel, samples: &[&Sample]) -> Result<Array2<f64>> {
    let mut parts = Vec::new();
    for chunk in samples.chunks(IMAGE_CHUNK) {
        let refs: Vec<_> = chunk.iter().map(|s| &s.touch).collect();
        parts.push(model.encode_patches(Tower::Touch, &refs)?);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("matching widths"))
}

/// Zero-shot accuracy on the touched records of `corpus`. Untouched records
/// carry no tactile class and are skipped.
pub fn evaluate(
    model: &TlvModel,
    corpus: &Corpus,
    task: EvalTask,
    labels: Option<&[String]>,
) -> Result<EvalReport> {
    let samples = eval_samples(corpus);
    if samples.is_empty() {
        return Err(EvalError::NoSamples);
    }
    let labels = match labels {
        Some(l) => l.to_vec(),
        None => default_labels(corpus, task)?,
    };
    let mut truths = Vec::with_capacity(samples.len());
    for s in &samples {
        let l = s.labels.get(task.name()).ok_or_else(|| EvalError::MissingLabel {
            id: s.id.clone(),
            task: task.name().to_string(),
        })?;
        let t = labels
            .iter()
            .position(|x| x == l)
            .ok_or_else(|| EvalError::UnknownLabel {
                id: s.id.clone(),
                label: l.clone(),
            })?;
        truths.push(t);
    }
    let prompts = build_class_prompts(model, task, &labels)?;
    let emb = touch_embeddings(model, &samples)?;
    let mut pairs = Vec::with_capacity(samples.len());
    for (row, &t) in emb.rows().into_iter().zip(&truths) {
        pairs.push((t, classify(row, &prompts)?));
    }
    Ok(EvalReport::from_predictions(task.name(), labels, pairs))
}

pub fn evaluate_all(model: &TlvModel, corpus: &Corpus) -> Result<Vec<EvalReport>> {
    EvalTask::ALL
        .iter()
        .map(|&t| evaluate(model, corpus, t, None))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: &'static str,
    pub use_vl: bool,
    pub use_tv: bool,
    pub reports: Vec<EvalReport>,
    pub checkpoint_digest: String,
    /// Loss breakdown of every step of the fine-tune.
    pub losses: Vec<LossBreakdown>,
}

/// The four configurations: full, without touch-vision, without
/// vision-language, without both.
pub const ABLATIONS: [(&str, bool, bool); 4] = [
    ("full", true, true),
    ("-TV", true, false),
    ("-VL", false, true),
    ("-(TV&VL)", false, false),
];

/// Fine-tunes one adapter set per ablation with identical seeds and data
/// order, then evaluates every task.
pub fn run_ablation_grid(
    foundation: &Checkpoint,
    train: &Corpus,
    eval: &Corpus,
    base: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(ABLATIONS.len());
    for (name, use_vl, use_tv) in ABLATIONS {
        let cfg = TrainConfig {
            use_vl,
            use_tv,
            ..base.clone()
        };
        let (ckpt, rep) = finetune_lora(foundation, train, &cfg)?;
        let reports = evaluate_all(&ckpt.model, eval)?;
        rows.push(AblationRow {
            name,
            use_vl,
            use_tv,
            reports,
            checkpoint_digest: ckpt.model.params.full_digest(),
            losses: rep.steps.iter().map(|s| s.breakdown).collect(),
        });
    }
    Ok(rows)
}

/// `config,task,accuracy` rows.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("config,task,accuracy\n");
    for r in rows {
        for rep in &r.reports {
            out.push_str(&format!("{},{},{:.6}\n", r.name, rep.task, rep.accuracy));
        }
    }
    out
}

/// Per-task accuracy lookup for a grid row.
pub fn row_accuracies(row: &AblationRow) -> BTreeMap<String, f64> {
    row.reports
        .iter()
        .map(|r| (r.task.clone(), r.accuracy))
        .collect()
}
