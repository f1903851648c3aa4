//! Touch, vision and text encoders sharing one embedding space.
//!
//! Touch and vision use the same transformer image architecture (touch frames
//! are plain RGB images). Each image is cut into non-overlapping patches,
//! linearly embedded, given learned position embeddings and passed through
//! pre-norm transformer blocks; the token outputs are mean-pooled, projected
//! to `d_emb` and L2-normalized. The text tower embeds word ids and uses the
//! same block structure.
//!
//! LoRA adapters can be attached to the query and value projections of
//! every touch and vision block. Once attached, only the adapter factors and
//! the log-temperature are trainable.

use image::RgbImage;
use ndarray::{Array1, Array2, Array3, Axis};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, NodeId, Segment};
use crate::lora::{self, LoraAdapter, LoraError};
use crate::loss::{LossError, LossWeights, INIT_TAU};
use crate::params::{ParamStore, Precision};
use crate::tokenizer::{Vocab, MAX_LEN};

pub const LOG_TAU: &str = "log_tau";
const LORA_A: &str = "lora_a";
const LORA_B: &str = "lora_b";
/// Projections that receive adapters in every image block.
pub const LORA_TARGETS: [&str; 2] = ["q", "v"];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(usize),
    #[error("sequence of {len} tokens exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("adapters are already attached")]
    AdaptersPresent,
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tower {
    Touch,
    Vision,
    Text,
}

impl Tower {
    pub fn prefix(self) -> &'static str {
        match self {
            Tower::Touch => "touch",
            Tower::Vision => "vision",
            Tower::Text => "text",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            d_model: 32,
            layers: 2,
            heads: 2,
            ff_mult: 4,
        }
    }
}

impl ImageEncoderConfig {
    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side().pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub max_len: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            layers: 3,
            heads: 2,
            ff_mult: 4,
            max_len: MAX_LEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image: ImageEncoderConfig,
    pub text: TextEncoderConfig,
    pub d_emb: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image: ImageEncoderConfig::default(),
            text: TextEncoderConfig::default(),
            d_emb: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let i = &self.image;
        if i.patch_size == 0 || !i.image_size.is_multiple_of(i.patch_size) {
            return Err(ModelError::Config(format!(
                "image side {} is not divisible by patch size {}",
                i.image_size, i.patch_size
            )));
        }
        if !i.d_model.is_multiple_of(i.heads) || !self.text.d_model.is_multiple_of(self.text.heads) {
            return Err(ModelError::Config("width not divisible by head count".into()));
        }
        if self.text.max_len > MAX_LEN || self.text.max_len < 2 {
            return Err(ModelError::Config(format!(
                "text max_len must be in 2..={MAX_LEN}"
            )));
        }
        if self.d_emb == 0 {
            return Err(ModelError::Config("d_emb must be positive".into()));
        }
        Ok(())
    }
}

/// Converts an 8-bit image to `(H, W, C)` values in `[0, 1]`.
pub fn image_to_array(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    })
}

/// Flattens an `(H, W, C)` image into one row per patch (row-major patch
/// order, `(dy, dx, c)` order inside a patch), centered around zero.
pub fn patchify(image: &Array3<f64>, cfg: &ImageEncoderConfig) -> Result<Array2<f64>> {
    let (h, w, c) = image.dim();
    if h != cfg.image_size || w != cfg.image_size || c != cfg.channels {
        return Err(ModelError::Shape {
            expected: format!("{0}x{0}x{1} image", cfg.image_size, cfg.channels),
            got: format!("{h}x{w}x{c}"),
        });
    }
    let p = cfg.patch_size;
    let side = cfg.patches_per_side();
    let mut out = Array2::zeros((cfg.num_patches(), cfg.patch_dim()));
    for py in 0..side {
        for px in 0..side {
            let mut row = out.row_mut(py * side + px);
            let mut idx = 0;
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..c {
                        row[idx] = image[[py * p + dy, px * p + dx, ch]] - 0.5;
                        idx += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Tri-modal encoder parameters plus the text vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TlvModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub precision: Precision,
    pub lora_rank: Option<usize>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Array2<f64> {
        let n = Normal::new(0.0, std).expect("positive std");
        Array2::from_shape_simple_fn((rows, cols), || n.sample(&mut self.rng))
    }

    fn linear(&mut self, store: &mut ParamStore, name: &str, out: usize, inp: usize, bias: bool) {
        let w = self.normal(out, inp, 1.0 / (inp as f64).sqrt());
        store.insert(format!("{name}.w"), w, true);
        if bias {
            store.insert(format!("{name}.b"), Array2::zeros((1, out)), true);
        }
    }

    fn layer_norm(&mut self, store: &mut ParamStore, name: &str, d: usize) {
        store.insert(format!("{name}.g"), Array2::ones((1, d)), true);
        store.insert(format!("{name}.b"), Array2::zeros((1, d)), true);
    }

    fn block(&mut self, store: &mut ParamStore, prefix: &str, d: usize, ff: usize) {
        self.layer_norm(store, &format!("{prefix}.ln1"), d);
        for proj in ["q", "k", "v", "o"] {
            self.linear(store, &format!("{prefix}.attn.{proj}"), d, d, true);
        }
        self.layer_norm(store, &format!("{prefix}.ln2"), d);
        self.linear(store, &format!("{prefix}.ff1"), ff, d, true);
        self.linear(store, &format!("{prefix}.ff2"), d, ff, true);
    }
}

impl TlvModel {
    /// Seeded initialization of all three towers and the temperature.
    pub fn init(config: ModelConfig, vocab: Vocab, seed: u64, precision: Precision) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut store = ParamStore::new();
        let ic = &config.image;
        for tower in [Tower::Touch, Tower::Vision] {
            let t = tower.prefix();
            init.linear(&mut store, &format!("{t}.patch"), ic.d_model, ic.patch_dim(), true);
            let pos = init.normal(ic.num_patches(), ic.d_model, 0.1);
            store.insert(format!("{t}.pos"), pos, true);
            for l in 0..ic.layers {
                init.block(&mut store, &format!("{t}.layer{l}"), ic.d_model, ic.d_model * ic.ff_mult);
            }
            init.layer_norm(&mut store, &format!("{t}.ln_f"), ic.d_model);
            init.linear(&mut store, &format!("{t}.proj"), config.d_emb, ic.d_model, false);
        }
        let tc = &config.text;
        let tok = init.normal(vocab.len(), tc.d_model, 0.1);
        store.insert("text.tok", tok, true);
        let pos = init.normal(tc.max_len, tc.d_model, 0.1);
        store.insert("text.pos", pos, true);
        for l in 0..tc.layers {
            init.block(&mut store, &format!("text.layer{l}"), tc.d_model, tc.d_model * tc.ff_mult);
        }
        init.layer_norm(&mut store, "text.ln_f", tc.d_model);
        init.linear(&mut store, "text.proj", config.d_emb, tc.d_model, false);
        store.insert(LOG_TAU, Array2::from_elem((1, 1), INIT_TAU.ln()), true);
        store.round_to(precision);
        Ok(Self {
            config,
            vocab,
            params: store,
            precision,
            lora_rank: None,
        })
    }

    pub fn is_lora_param(name: &str) -> bool {
        name.ends_with(LORA_A) || name.ends_with(LORA_B)
    }

    /// Names of the weights that carry (or would carry) adapters.
    pub fn lora_target_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for tower in [Tower::Touch, Tower::Vision] {
            for l in 0..self.config.image.layers {
                for t in LORA_TARGETS {
                    out.push(format!("{}.layer{l}.attn.{t}", tower.prefix()));
                }
            }
        }
        out
    }

    /// Attaches fresh adapters (seeded `A`, zero `B`) and freezes everything
    /// except the adapters and the log-temperature.
    pub fn attach_lora(&mut self, rank: usize, seed: u64) -> Result<()> {
        if self.lora_rank.is_some() {
            return Err(ModelError::AdaptersPresent);
        }
        let mut shapes = Vec::new();
        for target in self.lora_target_names() {
            let (d, k) = self
                .params
                .by_name(&format!("{target}.w"))
                .ok_or_else(|| ModelError::MissingParam(format!("{target}.w")))?
                .value
                .dim();
            lora::check_rank(d, k, rank)?;
            shapes.push((target, d, k));
        }
        let mut seeds = ChaCha8Rng::seed_from_u64(seed);
        for (target, d, k) in shapes {
            let mut a = lora::init_a(rank, k, seeds.next_u64());
            a.mapv_inplace(|v| self.precision.round(v));
            self.params.insert(format!("{target}.{LORA_A}"), a, true);
            self.params
                .insert(format!("{target}.{LORA_B}"), Array2::zeros((d, rank)), true);
        }
        self.params
            .set_trainable(|name| Self::is_lora_param(name) || name == LOG_TAU);
        self.lora_rank = Some(rank);
        Ok(())
    }

    /// Marks every parameter trainable (foundation phase).
    pub fn unfreeze_all(&mut self) {
        self.params.set_trainable(|_| true);
    }

    /// The adapter on `target` as a standalone [`LoraAdapter`].
    pub fn adapter(&self, target: &str) -> Option<LoraAdapter> {
        let base = self.params.by_name(&format!("{target}.w"))?;
        let a = self.params.by_name(&format!("{target}.{LORA_A}"))?;
        let b = self.params.by_name(&format!("{target}.{LORA_B}"))?;
        Some(LoraAdapter {
            target: target.to_string(),
            base: base.value.clone(),
            b: b.value.clone(),
            a: a.value.clone(),
            rank: a.value.nrows(),
        })
    }

    /// Adapter entries over all parameters (text encoder included).
    pub fn trainable_ratio(&self) -> f64 {
        let total = self.params.total_count();
        if total == 0 {
            return 0.0;
        }
        let lora: usize = self
            .params
            .iter()
            .filter(|p| {
                Self::is_lora_param(&p.name)
                    && (p.name.starts_with("touch.") || p.name.starts_with("vision."))
            })
            .map(|p| p.value.len())
            .sum();
        lora as f64 / total as f64
    }

    /// Digest of everything that must stay fixed during adapter fine-tuning:
    /// the whole text tower and every non-adapter image weight.
    pub fn frozen_digest(&self) -> String {
        self.params
            .digest(|p| !Self::is_lora_param(&p.name) && p.name != LOG_TAU)
    }

    pub fn text_digest(&self) -> String {
        self.params.digest(|p| p.name.starts_with("text."))
    }

    pub fn log_tau(&self) -> f64 {
        self.params.by_name(LOG_TAU).map(|p| p.value[[0, 0]]).unwrap_or(INIT_TAU.ln())
    }

    fn bind(&self, g: &mut Graph, name: &str) -> NodeId {
        let idx = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter {name} missing"));
        let p = self.params.get(idx);
        g.param(idx, &p.value, p.trainable)
    }

    fn dense(&self, g: &mut Graph, x: NodeId, name: &str, bias: bool) -> NodeId {
        let w = self.bind(g, &format!("{name}.w"));
        let mut y = g.linear(x, w);
        if bias {
            let b = self.bind(g, &format!("{name}.b"));
            y = g.add_bias(y, b);
        }
        if self.params.index_of(&format!("{name}.{LORA_A}")).is_some() {
            let a = self.bind(g, &format!("{name}.{LORA_A}"));
            let b = self.bind(g, &format!("{name}.{LORA_B}"));
            let low = g.linear(x, a);
            let delta = g.linear(low, b);
            y = g.add(y, delta);
        }
        y
    }

    fn norm(&self, g: &mut Graph, x: NodeId, name: &str) -> NodeId {
        let gain = self.bind(g, &format!("{name}.g"));
        let bias = self.bind(g, &format!("{name}.b"));
        g.layer_norm(x, gain, bias)
    }

    fn block(&self, g: &mut Graph, x: NodeId, prefix: &str, heads: usize, segs: &[Segment]) -> NodeId {
        let h = self.norm(g, x, &format!("{prefix}.ln1"));
        let q = self.dense(g, h, &format!("{prefix}.attn.q"), true);
        let k = self.dense(g, h, &format!("{prefix}.attn.k"), true);
        let v = self.dense(g, h, &format!("{prefix}.attn.v"), true);
        let att = g.attention(q, k, v, heads, segs);
        let o = self.dense(g, att, &format!("{prefix}.attn.o"), true);
        let x = g.add(x, o);
        let h = self.norm(g, x, &format!("{prefix}.ln2"));
        let f = self.dense(g, h, &format!("{prefix}.ff1"), true);
        let f = g.gelu(f);
        let f = self.dense(g, f, &format!("{prefix}.ff2"), true);
        g.add(x, f)
    }

    /// Adds an image tower to `g`; returns (projection output, normalized
    /// embedding) nodes, each with one row per image.
    pub fn image_tower(
        &self,
        g: &mut Graph,
        tower: Tower,
        patches: &[&Array2<f64>],
    ) -> Result<(NodeId, NodeId)> {
        assert!(tower != Tower::Text, "text tower has its own entry point");
        let cfg = &self.config.image;
        if patches.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let t = cfg.num_patches();
        for p in patches {
            if p.dim() != (t, cfg.patch_dim()) {
                return Err(ModelError::Shape {
                    expected: format!("{t}x{} patch matrix", cfg.patch_dim()),
                    got: format!("{:?}", p.dim()),
                });
            }
        }
        let views: Vec<_> = patches.iter().map(|p| p.view()).collect();
        let stacked = ndarray::concatenate(Axis(0), &views).expect("uniform patch shapes");
        let prefix = tower.prefix();
        let input = g.input(stacked);
        let mut x = self.dense(g, input, &format!("{prefix}.patch"), true);
        let pos_table = self.bind(g, &format!("{prefix}.pos"));
        let pos_rows: Vec<usize> = (0..patches.len()).flat_map(|_| 0..t).collect();
        let pos = g.gather(pos_table, pos_rows);
        x = g.add(x, pos);
        let segs: Vec<Segment> = (0..patches.len()).map(|i| (i * t, t)).collect();
        for l in 0..cfg.layers {
            x = self.block(g, x, &format!("{prefix}.layer{l}"), cfg.heads, &segs);
        }
        let x = self.norm(g, x, &format!("{prefix}.ln_f"));
        let pooled = g.segment_mean(x, &segs);
        let proj = self.dense(g, pooled, &format!("{prefix}.proj"), false);
        let emb = g.l2_normalize(proj);
        Ok((proj, emb))
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() > self.config.text.max_len {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.text.max_len,
            });
        }
        if tokens.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab.len()) {
            return Err(ModelError::UnknownToken(bad));
        }
        Ok(())
    }

    /// Adds the text tower to `g`; returns (projection output, normalized
    /// embedding) nodes.
    pub fn text_tower(&self, g: &mut Graph, sequences: &[&[usize]]) -> Result<(NodeId, NodeId)> {
        if sequences.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        for s in sequences {
            self.check_tokens(s)?;
        }
        let cfg = &self.config.text;
        let ids: Vec<usize> = sequences.iter().flat_map(|s| s.iter().copied()).collect();
        let positions: Vec<usize> = sequences.iter().flat_map(|s| 0..s.len()).collect();
        let mut segs = Vec::with_capacity(sequences.len());
        let mut start = 0;
        for s in sequences {
            segs.push((start, s.len()));
            start += s.len();
        }
        let tok_table = self.bind(g, "text.tok");
        let pos_table = self.bind(g, "text.pos");
        let tok = g.gather(tok_table, ids);
        let pos = g.gather(pos_table, positions);
        let mut x = g.add(tok, pos);
        for l in 0..cfg.layers {
            x = self.block(g, x, &format!("text.layer{l}"), cfg.heads, &segs);
        }
        let x = self.norm(g, x, "text.ln_f");
        let pooled = g.segment_mean(x, &segs);
        let proj = self.dense(g, pooled, "text.proj", false);
        let emb = g.l2_normalize(proj);
        Ok((proj, emb))
    }

    /// Unit-norm embeddings, one row per patch matrix.
    pub fn encode_patches(&self, tower: Tower, patches: &[&Array2<f64>]) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let (_, emb) = self.image_tower(&mut g, tower, patches)?;
        Ok(g.value(emb).clone())
    }

    pub fn encode_image(&self, tower: Tower, image: &Array3<f64>) -> Result<Array1<f64>> {
        let patches = patchify(image, &self.config.image)?;
        Ok(self.encode_patches(tower, &[&patches])?.row(0).to_owned())
    }

    /// Projection output before L2 normalization.
    pub fn image_activations(&self, tower: Tower, image: &Array3<f64>) -> Result<Array1<f64>> {
        let patches = patchify(image, &self.config.image)?;
        let mut g = Graph::new();
        let (proj, _) = self.image_tower(&mut g, tower, &[&patches])?;
        Ok(g.value(proj).row(0).to_owned())
    }

    pub fn encode_token_batch(&self, sequences: &[&[usize]]) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let (_, emb) = self.text_tower(&mut g, sequences)?;
        Ok(g.value(emb).clone())
    }

    pub fn encode_tokens(&self, tokens: &[usize]) -> Result<Array1<f64>> {
        Ok(self.encode_token_batch(&[tokens])?.row(0).to_owned())
    }

    pub fn encode_text(&self, text: &str) -> Result<Array1<f64>> {
        self.encode_tokens(&self.vocab.tokenize(text))
    }

    /// Builds the joint contrastive objective for one batch. `text` supplies
    /// either token sequences or precomputed (frozen) text embeddings.
    pub fn loss_graph(
        &self,
        touch: &[&Array2<f64>],
        vision: &[&Array2<f64>],
        text: TextInput<'_>,
        weights: &LossWeights,
    ) -> Result<(Graph, NodeId)> {
        let mut g = Graph::new();
        let (_, x) = self.image_tower(&mut g, Tower::Touch, touch)?;
        let y = match text {
            TextInput::Tokens(seqs) => self.text_tower(&mut g, seqs)?.1,
            TextInput::Embeddings(e) => g.input(e.clone()),
        };
        let z = if weights.uses_vision() {
            Some(self.image_tower(&mut g, Tower::Vision, vision)?.1)
        } else {
            None
        };
        let log_tau = self.bind(&mut g, LOG_TAU);
        let root = g.joint_loss(x, y, z, log_tau, weights)?;
        Ok((g, root))
    }

    /// True when no text parameter is trainable.
    pub fn text_frozen(&self) -> bool {
        self.params
            .iter()
            .filter(|p| p.name.starts_with("text."))
            .all(|p| !p.trainable)
    }
}

pub enum TextInput<'a> {
    Tokens(&'a [&'a [usize]]),
    Embeddings(&'a Array2<f64>),
}
