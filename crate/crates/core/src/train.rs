//! Foundation pretraining, adapter fine-tuning and finite-difference
//! gradient checks.

use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::config::{Phase, TrainConfig};
use crate::corpus::{Corpus, Sample};
use crate::encoder::{ModelConfig, ModelError, TextInput, TlvModel, LOG_TAU};
use crate::eval::prompt_vocabulary;
use crate::loss::{LossBreakdown, LossWeights};
use crate::optim::AdamW;
use crate::params::Precision;
use crate::tokenizer::Vocab;

/// Captions encoded per forward pass when caching frozen text embeddings.
const TEXT_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("corpus has {have} usable samples, batch size is {need}")]
    TooFewSamples { have: usize, need: usize },
    #[error("starting checkpoint is a {0} checkpoint; adapter fine-tuning needs a foundation checkpoint")]
    WrongPhase(&'static str),
    #[error("loss became non-finite at step {0}")]
    Diverged(usize),
    #[error("gradient check needs verification precision")]
    NeedsVerification,
    #[error("gradient check needs at least one trainable parameter")]
    NothingTrainable,
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub breakdown: LossBreakdown,
    pub tau: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub phase: Phase,
    pub config_digest: String,
    pub steps: Vec<StepLog>,
    pub trainable_ratio: f64,
    pub trainable_params: usize,
    pub total_params: usize,
    pub frozen_digest_before: String,
    pub frozen_digest_after: String,
    pub text_digest_before: String,
    pub text_digest_after: String,
    /// Tensors whose values changed during training.
    pub updated_tensors: Vec<String>,
    pub declared_trainable: Vec<String>,
    pub wall_clock_secs: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,L_TL,L_LT,L_VL,L_LV,L_TV,L_VT,total,tau";

impl TrainReport {
    /// Per-step loss breakdown as CSV with [`LOSS_CSV_HEADER`].
    pub fn loss_csv(&self) -> String {
        let mut out = String::from(LOSS_CSV_HEADER);
        out.push('\n');
        for s in &self.steps {
            let b = &s.breakdown;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                s.step, b.l_tl, b.l_lt, b.l_vl, b.l_lv, b.l_tv, b.l_vt, b.total, s.tau
            ));
        }
        out
    }

    /// Every updated tensor was declared trainable and the frozen digest
    /// did not move.
    pub fn freezing_held(&self) -> bool {
        self.frozen_digest_before == self.frozen_digest_after
            && self
                .updated_tensors
                .iter()
                .all(|t| self.declared_trainable.contains(t))
    }

    pub fn mean_total(&self, last: usize) -> f64 {
        let tail = &self.steps[self.steps.len().saturating_sub(last)..];
        tail.iter().map(|s| s.breakdown.total).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Seeded per-epoch shuffles with drop-last batching.
#[derive(Debug, Clone)]
pub struct Batcher {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
    batch_size: usize,
}

impl Batcher {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        assert!(batch_size <= n && batch_size > 0);
        let mut b = Self {
            order: (0..n).collect(),
            pos: 0,
            epoch: 0,
            seed,
            batch_size,
        };
        b.shuffle();
        b
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch);
        self.order.sort_unstable();
        self.order.shuffle(&mut rng);
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch_size > self.order.len() {
            self.epoch += 1;
            self.pos = 0;
            self.shuffle();
        }
        let b = self.order[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        b
    }
}

/// Frozen text embeddings, one row per sample.
fn text_cache(model: &TlvModel, samples: &[&Sample]) -> Result<Array2<f64>> {
    let tokens: Vec<Vec<usize>> = samples
        .iter()
        .map(|s| model.vocab.tokenize(&s.caption))
        .collect();
    let mut rows = Vec::with_capacity(samples.len());
    for chunk in tokens.chunks(TEXT_CHUNK) {
        let refs: Vec<&[usize]> = chunk.iter().map(|t| t.as_slice()).collect();
        rows.push(model.encode_token_batch(&refs)?);
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("matching widths"))
}

fn select<'a>(corpus: &'a Corpus, cfg: &TrainConfig) -> Result<Vec<&'a Sample>> {
    let samples: Vec<&Sample> = corpus
        .samples
        .iter()
        .filter(|s| cfg.include_untouched || s.touched)
        .collect();
    if samples.len() < cfg.batch_size {
        return Err(TrainError::TooFewSamples {
            have: samples.len(),
            need: cfg.batch_size,
        });
    }
    Ok(samples)
}

/// Loss graph for the batch `idx` of `samples`.
fn batch_loss(
    model: &TlvModel,
    samples: &[&Sample],
    idx: &[usize],
    cache: Option<&Array2<f64>>,
    weights: &LossWeights,
) -> Result<(crate::graph::Graph, crate::graph::NodeId)> {
    let touch: Vec<&Array2<f64>> = idx.iter().map(|&i| &samples[i].touch).collect();
    let vision: Vec<&Array2<f64>> = idx.iter().map(|&i| &samples[i].vision).collect();
    Ok(match cache {
        Some(c) => {
            let y = c.select(Axis(0), idx);
            model.loss_graph(&touch, &vision, TextInput::Embeddings(&y), weights)?
        }
        None => {
            let toks: Vec<Vec<usize>> = idx
                .iter()
                .map(|&i| model.vocab.tokenize(&samples[i].caption))
                .collect();
            let refs: Vec<&[usize]> = toks.iter().map(|t| t.as_slice()).collect();
            model.loss_graph(&touch, &vision, TextInput::Tokens(&refs), weights)?
        }
    })
}

fn run(
    model: &mut TlvModel,
    samples: &[&Sample],
    cfg: &TrainConfig,
    opt: &mut AdamW,
) -> Result<Vec<StepLog>> {
    let cache = if model.text_frozen() {
        Some(text_cache(model, samples)?)
    } else {
        None
    };
    let tau_idx = model.params.index_of(LOG_TAU);
    let mut batcher = Batcher::new(samples.len(), cfg.batch_size, cfg.seed);
    let mut logs = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = batcher.next_batch();
        let weights = cfg.loss_weights(model.log_tau());
        let (g, root) = batch_loss(model, samples, &idx, cache.as_ref(), &weights)?;
        let breakdown = g.breakdown(root).expect("root is a loss node");
        if !breakdown.total.is_finite() {
            return Err(TrainError::Diverged(step));
        }
        let grads: Vec<(usize, Array2<f64>)> = g
            .backward(root)
            .params()
            .map(|(i, gr)| (i, gr.clone()))
            .collect();
        let grad_norm = opt.update(&mut model.params, grads, model.precision);
        if let Some(t) = tau_idx {
            let v = &mut model.params.get_mut(t).value;
            v[[0, 0]] = model.precision.round(LossWeights::clamp_log_tau(v[[0, 0]]));
        }
        logs.push(StepLog {
            step,
            breakdown,
            tau: weights.tau(),
            grad_norm,
        });
        if step % 50 == 0 {
            log::debug!("step {step}: loss {:.4} tau {:.4}", breakdown.total, weights.tau());
        }
    }
    Ok(logs)
}

fn report(
    phase: Phase,
    cfg: &TrainConfig,
    before: &TlvModel,
    after: &TlvModel,
    steps: Vec<StepLog>,
    started: Instant,
) -> TrainReport {
    TrainReport {
        phase,
        config_digest: cfg.digest(),
        steps,
        trainable_ratio: after.trainable_ratio(),
        trainable_params: after
            .params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum(),
        total_params: after.params.total_count(),
        frozen_digest_before: before.frozen_digest(),
        frozen_digest_after: after.frozen_digest(),
        text_digest_before: before.text_digest(),
        text_digest_after: after.text_digest(),
        updated_tensors: after.params.changed_since(&before.params),
        declared_trainable: after.params.trainable_names(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    }
}

/// Vocabulary over the corpus captions plus the zero-shot prompt words.
pub fn build_vocab(corpus: &Corpus) -> Vocab {
    let prompts = prompt_vocabulary();
    Vocab::build(corpus.captions().chain(prompts.iter().map(|s| s.as_str())))
}

/// Trains all three towers and the temperature from a seeded init.
pub fn pretrain_foundation(
    corpus: &Corpus,
    model_config: ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainReport)> {
    let started = Instant::now();
    let samples = select(corpus, cfg)?;
    let mut model = TlvModel::init(model_config, build_vocab(corpus), cfg.seed, cfg.precision)?;
    model.unfreeze_all();
    let initial = model.clone();
    let mut opt = AdamW::new(cfg.optimizer());
    let steps = run(&mut model, &samples, cfg, &mut opt)?;
    let rep = report(Phase::Foundation, cfg, &initial, &model, steps, started);
    Ok((
        Checkpoint {
            phase: Phase::Foundation,
            model,
            optimizer: Some(opt),
            config_digest: cfg.digest(),
        },
        rep,
    ))
}

/// Attaches fresh adapters to a foundation model and trains only the
/// adapters and the temperature.
pub fn finetune_lora(
    foundation: &Checkpoint,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainReport)> {
    let started = Instant::now();
    if foundation.phase != Phase::Foundation || foundation.model.lora_rank.is_some() {
        return Err(TrainError::WrongPhase(foundation.phase.as_str()));
    }
    let samples = select(corpus, cfg)?;
    let mut model = foundation.model.clone();
    model.precision = cfg.precision;
    model.params.round_to(cfg.precision);
    model.attach_lora(cfg.lora_rank, cfg.seed ^ 0x10_4A)?;
    let initial = model.clone();
    let mut opt = AdamW::new(cfg.optimizer());
    let steps = run(&mut model, &samples, cfg, &mut opt)?;
    let rep = report(Phase::Lora, cfg, &initial, &model, steps, started);
    Ok((
        Checkpoint {
            phase: Phase::Lora,
            model,
            optimizer: Some(opt),
            config_digest: cfg.digest(),
        },
        rep,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub coordinates: usize,
    pub step: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            coordinates: 200,
            step: 1e-5,
            floor: 5e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoordCheck {
    pub param: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    /// `true` when the batch was degenerate and nothing was checked.
    pub skipped: bool,
    pub coords: Vec<CoordCheck>,
    pub max_rel_error: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn degenerate(batch: &[&Sample]) -> bool {
    let first = batch[0];
    batch.len() < 2
        || batch
            .iter()
            .all(|s| s.touch == first.touch && s.vision == first.vision && s.caption == first.caption)
}

/// Compares backpropagated gradients of the joint loss against central
/// differences at randomly sampled trainable coordinates.
pub fn grad_check(
    model: &TlvModel,
    batch: &[&Sample],
    weights: &LossWeights,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if model.precision != Precision::Verification {
        return Err(TrainError::NeedsVerification);
    }
    if batch.is_empty() || degenerate(batch) {
        return Ok(GradCheckReport {
            skipped: true,
            coords: Vec::new(),
            max_rel_error: 0.0,
        });
    }
    let idx: Vec<usize> = (0..batch.len()).collect();
    let weights = LossWeights {
        log_tau: model.log_tau(),
        ..*weights
    };
    let (g, root) = batch_loss(model, batch, &idx, None, &weights)?;
    let grads = g.backward(root);
    let analytic: std::collections::HashMap<usize, &Array2<f64>> = grads.params().collect();

    let trainable: Vec<usize> = (0..model.params.len())
        .filter(|&i| model.params.get(i).trainable)
        .collect();
    let sizes: Vec<usize> = trainable.iter().map(|&i| model.params.get(i).value.len()).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(TrainError::NothingTrainable);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = model.clone();
    let mut coords = Vec::with_capacity(opts.coordinates);
    let loss_at = |m: &TlvModel| -> Result<f64> {
        let w = LossWeights {
            log_tau: m.log_tau(),
            ..weights
        };
        let (g, root) = batch_loss(m, batch, &idx, None, &w)?;
        Ok(g.value(root)[[0, 0]])
    };
    for _ in 0..opts.coordinates {
        let mut flat = rng.random_range(0..total);
        let mut k = 0;
        while flat >= sizes[k] {
            flat -= sizes[k];
            k += 1;
        }
        let pidx = trainable[k];
        let cols = model.params.get(pidx).value.ncols();
        let (row, col) = (flat / cols, flat % cols);
        let orig = model.params.get(pidx).value[[row, col]];
        probe.params.get_mut(pidx).value[[row, col]] = orig + opts.step;
        let plus = loss_at(&probe)?;
        probe.params.get_mut(pidx).value[[row, col]] = orig - opts.step;
        let minus = loss_at(&probe)?;
        probe.params.get_mut(pidx).value[[row, col]] = orig;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic.get(&pidx).map_or(0.0, |g| g[[row, col]]);
        coords.push(CoordCheck {
            param: model.params.get(pidx).name.clone(),
            row,
            col,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric, opts.floor),
        });
    }
    let max_rel_error = coords.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        skipped: false,
        coords,
        max_rel_error,
    })
}
