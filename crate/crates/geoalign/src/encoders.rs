//! Tiny dual encoders: a patch-based vision transformer producing a global
//! embedding plus a spatial feature map, and a masked text transformer for
//! brief, detail, region, and hard-negative descriptions.
//!
//! Raw embeddings are returned un-normalized; cosine normalization happens
//! inside the losses and the evaluation ops.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Result, Tape, Tensor, TensorError};
use crate::rng::{randn_tensor, stream_rng};

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
const RESERVED_TOKENS: usize = 3;

const LN_EPS: f64 = 1e-5;
const ATTN_MASK_NEG: f64 = -1e30;
const WEIGHT_STD: f64 = 0.02;
const POS_STD: f64 = 0.01;
/// Initial temperature, stored as log_temperature.
pub const INIT_TEMPERATURE: f64 = 0.07;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VisionEncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
}

impl Default for VisionEncoderConfig {
    fn default() -> Self {
        VisionEncoderConfig {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            depth: 2,
            heads: 4,
        }
    }
}

impl VisionEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(TensorError::InvalidArg {
                op: "vision_config",
                msg: format!(
                    "image_size {} not divisible by patch_size {}",
                    self.image_size, self.patch_size
                ),
            });
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(TensorError::InvalidArg {
                op: "vision_config",
                msg: format!(
                    "embed_dim {} not divisible by heads {}",
                    self.embed_dim, self.heads
                ),
            });
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub max_tokens_base: usize,
    pub max_tokens_stretched: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Leading positions copied verbatim when stretching the positional table.
    pub stretch_keep: usize,
}

impl TextEncoderConfig {
    pub fn with_vocab_size(vocab_size: usize) -> Self {
        TextEncoderConfig {
            vocab_size,
            max_tokens_base: 32,
            max_tokens_stretched: 64,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            stretch_keep: 32 / 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_tokens_stretched < self.max_tokens_base {
            return Err(TensorError::InvalidArg {
                op: "text_config",
                msg: format!(
                    "max_tokens_stretched {} < max_tokens_base {}",
                    self.max_tokens_stretched, self.max_tokens_base
                ),
            });
        }
        if self.vocab_size <= RESERVED_TOKENS {
            return Err(TensorError::InvalidArg {
                op: "text_config",
                msg: format!("vocab_size {} leaves no room for words", self.vocab_size),
            });
        }
        if self.stretch_keep >= self.max_tokens_base {
            return Err(TensorError::InvalidArg {
                op: "text_config",
                msg: format!(
                    "stretch_keep {} must be below max_tokens_base {}",
                    self.stretch_keep, self.max_tokens_base
                ),
            });
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(TensorError::InvalidArg {
                op: "text_config",
                msg: format!(
                    "embed_dim {} not divisible by heads {}",
                    self.embed_dim, self.heads
                ),
            });
        }
        Ok(())
    }
}

// ── vocabulary and tokenization ─────────────────────────────────────────

/// Word-level vocabulary with reserved PAD/CLS/UNK ids. Word ids are
/// assigned in sorted order, so the mapping is deterministic for a corpus.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TokenVocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl TokenVocab {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = texts
            .into_iter()
            .flat_map(split_words)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        words.sort();
        let mut vocab = TokenVocab {
            words,
            index: HashMap::new(),
        };
        vocab.rebuild_index();
        vocab
    }

    /// Rebuild from a stored word list (checkpoint metadata).
    pub fn from_words(words: Vec<String>) -> Self {
        let mut vocab = TokenVocab {
            words,
            index: HashMap::new(),
        };
        vocab.rebuild_index();
        vocab
    }

    /// Restore the word→id index after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), (i + RESERVED_TOKENS) as u32))
            .collect();
    }

    pub fn id_of(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    /// Total id count including reserved tokens.
    pub fn size(&self) -> usize {
        self.words.len() + RESERVED_TOKENS
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

fn split_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Lowercase, split on non-alphanumerics, prepend CLS, truncate or pad to
/// `max_tokens`. Unknown words map to UNK; empty text is an error.
pub fn tokenize(text: &str, vocab: &TokenVocab, max_tokens: usize) -> Result<Vec<u32>> {
    let words = split_words(text);
    if words.is_empty() {
        return Err(TensorError::InvalidArg {
            op: "tokenize",
            msg: "empty text".into(),
        });
    }
    let mut ids = Vec::with_capacity(max_tokens);
    ids.push(CLS_ID);
    for w in words {
        if ids.len() == max_tokens {
            break;
        }
        ids.push(vocab.id_of(&w));
    }
    ids.resize(max_tokens, PAD_ID);
    Ok(ids)
}

// ── parameters ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w_fc1: Tensor,
    pub b_fc1: Tensor,
    pub w_fc2: Tensor,
    pub b_fc2: Tensor,
}

#[derive(Debug, Clone)]
pub struct TowerParams {
    pub blocks: Vec<BlockParams>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub proj: Tensor,
}

/// All learnable weights of both encoders plus the log-temperature.
#[derive(Debug, Clone)]
pub struct DualEncoderParams {
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub vision_cls: Tensor,
    pub vision_pos: Tensor,
    pub vision: TowerParams,
    pub tok_emb: Tensor,
    pub text_pos: Tensor,
    pub text: TowerParams,
    pub log_temperature: Tensor,
}

fn init_block(prefix: &str, seed: u64, d: usize) -> BlockParams {
    let hidden = 4 * d;
    let w = |name: &str, shape: &[usize], std: f64| {
        randn_tensor(&mut stream_rng(seed, &format!("init.{prefix}.{name}"), 0), shape, std)
    };
    BlockParams {
        ln1_g: Tensor::full(&[d], 1.0),
        ln1_b: Tensor::zeros(&[d]),
        wq: w("wq", &[d, d], WEIGHT_STD),
        bq: Tensor::zeros(&[d]),
        wk: w("wk", &[d, d], WEIGHT_STD),
        bk: Tensor::zeros(&[d]),
        wv: w("wv", &[d, d], WEIGHT_STD),
        bv: Tensor::zeros(&[d]),
        wo: w("wo", &[d, d], WEIGHT_STD),
        bo: Tensor::zeros(&[d]),
        ln2_g: Tensor::full(&[d], 1.0),
        ln2_b: Tensor::zeros(&[d]),
        w_fc1: w("w_fc1", &[d, hidden], WEIGHT_STD),
        b_fc1: Tensor::zeros(&[hidden]),
        w_fc2: w("w_fc2", &[hidden, d], WEIGHT_STD),
        b_fc2: Tensor::zeros(&[d]),
    }
}

fn init_tower(prefix: &str, seed: u64, d: usize, depth: usize) -> TowerParams {
    TowerParams {
        blocks: (0..depth)
            .map(|i| init_block(&format!("{prefix}.block{i}"), seed, d))
            .collect(),
        lnf_g: Tensor::full(&[d], 1.0),
        lnf_b: Tensor::zeros(&[d]),
        proj: randn_tensor(
            &mut stream_rng(seed, &format!("init.{prefix}.proj"), 0),
            &[d, d],
            WEIGHT_STD,
        ),
    }
}

impl DualEncoderParams {
    pub fn init(vision: &VisionEncoderConfig, text: &TextEncoderConfig, seed: u64) -> Result<Self> {
        vision.validate()?;
        text.validate()?;
        let d = vision.embed_dim;
        if text.embed_dim != d {
            return Err(TensorError::InvalidArg {
                op: "params_init",
                msg: format!(
                    "shared embedding dim mismatch: vision {d}, text {}",
                    text.embed_dim
                ),
            });
        }
        let patch_in = 3 * vision.patch_size * vision.patch_size;
        let w = |name: &str, shape: &[usize], std: f64| {
            randn_tensor(&mut stream_rng(seed, &format!("init.{name}"), 0), shape, std)
        };
        Ok(DualEncoderParams {
            patch_w: w("vision.patch.w", &[patch_in, d], WEIGHT_STD),
            patch_b: Tensor::zeros(&[d]),
            vision_cls: w("vision.cls", &[d], WEIGHT_STD),
            vision_pos: w("vision.pos", &[vision.num_patches() + 1, d], POS_STD),
            vision: init_tower("vision", seed, d, vision.depth),
            tok_emb: w("text.tok_emb", &[text.vocab_size, d], WEIGHT_STD),
            text_pos: w("text.pos", &[text.max_tokens_base, d], POS_STD),
            text: init_tower("text", seed, d, text.depth),
            log_temperature: Tensor::scalar(INIT_TEMPERATURE.ln()),
        })
    }

    /// Current clamped temperature value.
    pub fn tau(&self) -> f64 {
        self.log_temperature.item().exp().clamp(TAU_MIN, TAU_MAX)
    }

    /// Stable (name, tensor) listing of every parameter.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("vision.patch.w".into(), &self.patch_w),
            ("vision.patch.b".into(), &self.patch_b),
            ("vision.cls".into(), &self.vision_cls),
            ("vision.pos".into(), &self.vision_pos),
        ];
        named_tower("vision", &self.vision, &mut out);
        out.push(("text.tok_emb".into(), &self.tok_emb));
        out.push(("text.pos".into(), &self.text_pos));
        named_tower("text", &self.text, &mut out);
        out.push(("log_temperature".into(), &self.log_temperature));
        out
    }

    /// Mutable counterpart of [`Self::named`], in the same order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("vision.patch.w".into(), &mut self.patch_w),
            ("vision.patch.b".into(), &mut self.patch_b),
            ("vision.cls".into(), &mut self.vision_cls),
            ("vision.pos".into(), &mut self.vision_pos),
        ];
        named_tower_mut("vision", &mut self.vision, &mut out);
        out.push(("text.tok_emb".into(), &mut self.tok_emb));
        out.push(("text.pos".into(), &mut self.text_pos));
        named_tower_mut("text", &mut self.text, &mut out);
        out.push(("log_temperature".into(), &mut self.log_temperature));
        out
    }

    /// Rebuild params from a named tensor table (checkpoint load). Every
    /// expected name must be present with the right shape.
    pub fn from_named(
        vision: &VisionEncoderConfig,
        text: &TextEncoderConfig,
        table: &HashMap<String, Tensor>,
    ) -> Result<Self> {
        let mut params = Self::init(vision, text, 0)?;
        for (name, slot) in params.named_mut() {
            let t = table.get(&name).ok_or_else(|| TensorError::InvalidArg {
                op: "params_load",
                msg: format!("missing tensor {name}"),
            })?;
            if t.shape() != slot.shape() {
                return Err(TensorError::InvalidArg {
                    op: "params_load",
                    msg: format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    ),
                });
            }
            *slot = t.clone();
        }
        let expected: usize = params.named().len();
        if table.len() != expected {
            return Err(TensorError::InvalidArg {
                op: "params_load",
                msg: format!("table has {} tensors, expected {expected}", table.len()),
            });
        }
        Ok(params)
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }
}

fn named_tower<'a>(prefix: &str, tower: &'a TowerParams, out: &mut Vec<(String, &'a Tensor)>) {
    for (i, b) in tower.blocks.iter().enumerate() {
        let p = format!("{prefix}.block{i}");
        out.extend([
            (format!("{p}.ln1.g"), &b.ln1_g),
            (format!("{p}.ln1.b"), &b.ln1_b),
            (format!("{p}.attn.wq"), &b.wq),
            (format!("{p}.attn.bq"), &b.bq),
            (format!("{p}.attn.wk"), &b.wk),
            (format!("{p}.attn.bk"), &b.bk),
            (format!("{p}.attn.wv"), &b.wv),
            (format!("{p}.attn.bv"), &b.bv),
            (format!("{p}.attn.wo"), &b.wo),
            (format!("{p}.attn.bo"), &b.bo),
            (format!("{p}.ln2.g"), &b.ln2_g),
            (format!("{p}.ln2.b"), &b.ln2_b),
            (format!("{p}.mlp.w1"), &b.w_fc1),
            (format!("{p}.mlp.b1"), &b.b_fc1),
            (format!("{p}.mlp.w2"), &b.w_fc2),
            (format!("{p}.mlp.b2"), &b.b_fc2),
        ]);
    }
    out.push((format!("{prefix}.lnf.g"), &tower.lnf_g));
    out.push((format!("{prefix}.lnf.b"), &tower.lnf_b));
    out.push((format!("{prefix}.proj"), &tower.proj));
}

fn named_tower_mut<'a>(
    prefix: &str,
    tower: &'a mut TowerParams,
    out: &mut Vec<(String, &'a mut Tensor)>,
) {
    for (i, b) in tower.blocks.iter_mut().enumerate() {
        let p = format!("{prefix}.block{i}");
        out.extend([
            (format!("{p}.ln1.g"), &mut b.ln1_g),
            (format!("{p}.ln1.b"), &mut b.ln1_b),
            (format!("{p}.attn.wq"), &mut b.wq),
            (format!("{p}.attn.bq"), &mut b.bq),
            (format!("{p}.attn.wk"), &mut b.wk),
            (format!("{p}.attn.bk"), &mut b.bk),
            (format!("{p}.attn.wv"), &mut b.wv),
            (format!("{p}.attn.bv"), &mut b.bv),
            (format!("{p}.attn.wo"), &mut b.wo),
            (format!("{p}.attn.bo"), &mut b.bo),
            (format!("{p}.ln2.g"), &mut b.ln2_g),
            (format!("{p}.ln2.b"), &mut b.ln2_b),
            (format!("{p}.mlp.w1"), &mut b.w_fc1),
            (format!("{p}.mlp.b1"), &mut b.b_fc1),
            (format!("{p}.mlp.w2"), &mut b.w_fc2),
            (format!("{p}.mlp.b2"), &mut b.b_fc2),
        ]);
    }
    out.push((format!("{prefix}.lnf.g"), &mut tower.lnf_g));
    out.push((format!("{prefix}.lnf.b"), &mut tower.lnf_b));
    out.push((format!("{prefix}.proj"), &mut tower.proj));
}

// ── tape binding ────────────────────────────────────────────────────────

/// Parameters registered as leaves on one tape, for one forward/backward
/// execution. Gradients are collected back by name through [`Self::named`].
pub struct BoundParams {
    pub params: DualEncoderParams,
}

impl BoundParams {
    pub fn bind(tape: &Tape, params: &DualEncoderParams) -> Self {
        let mut bound = params.clone();
        for (_, slot) in bound.named_mut() {
            *slot = tape.watch(slot);
        }
        BoundParams { params: bound }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        self.params.named()
    }
}

// ── forward passes ──────────────────────────────────────────────────────

pub struct VisionOutput {
    /// Global CLS embedding, `[d]`, un-normalized.
    pub v_g: Tensor,
    /// Patch-token grid projected to the shared dim, `[d, grid, grid]`.
    pub feature_map: Tensor,
}

/// Row-softmax of `scores` with an optional additive mask, computed via the
/// stable log-softmax. Exposed for the attention row-sum invariant tests.
pub(crate) fn masked_softmax(tape: &Tape, scores: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let logits = match mask {
        Some(m) => tape.add(scores, m)?,
        None => scores.clone(),
    };
    tape.exp(&tape.log_softmax_rows(&logits)?)
}

fn linear(tape: &Tape, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    tape.broadcast_add_row(&tape.matmul(x, w)?, b)
}

fn attention(
    tape: &Tape,
    x: &Tensor,
    block: &BlockParams,
    heads: usize,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    let d = *x.shape().last().unwrap();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear(tape, x, &block.wq, &block.bq)?;
    let k = linear(tape, x, &block.wk, &block.bk)?;
    let v = linear(tape, x, &block.wv, &block.bv)?;
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (s, e) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(&q, s, e)?;
        let kh = tape.slice_cols(&k, s, e)?;
        let vh = tape.slice_cols(&v, s, e)?;
        let scores = tape.mul_scalar(&tape.matmul(&qh, &tape.transpose(&kh)?)?, scale)?;
        let probs = masked_softmax(tape, &scores, mask)?;
        head_outs.push(tape.matmul(&probs, &vh)?);
    }
    // Concatenate heads along columns: transpose trick over rows.
    let cols: Vec<Tensor> = head_outs
        .iter()
        .map(|t| tape.transpose(t))
        .collect::<Result<_>>()?;
    let col_refs: Vec<&Tensor> = cols.iter().collect();
    let merged = tape.transpose(&tape.concat_rows(&col_refs)?)?;
    linear(tape, &merged, &block.wo, &block.bo)
}

fn transformer_block(
    tape: &Tape,
    x: &Tensor,
    block: &BlockParams,
    heads: usize,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    let normed = tape.layer_norm(x, &block.ln1_g, &block.ln1_b, LN_EPS)?;
    let x = tape.add(x, &attention(tape, &normed, block, heads, mask)?)?;
    let normed = tape.layer_norm(&x, &block.ln2_g, &block.ln2_b, LN_EPS)?;
    let h = tape.gelu(&linear(tape, &normed, &block.w_fc1, &block.b_fc1)?)?;
    let mlp = linear(tape, &h, &block.w_fc2, &block.b_fc2)?;
    tape.add(&x, &mlp)
}

/// Flat gather indices turning `[3, H, W]` into `[n_patches, 3·p·p]` rows.
fn patch_indices(cfg: &VisionEncoderConfig) -> Vec<usize> {
    let (hw, p, g) = (cfg.image_size, cfg.patch_size, cfg.grid());
    let mut idx = Vec::with_capacity(cfg.num_patches() * 3 * p * p);
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..3 {
                for py in 0..p {
                    for px in 0..p {
                        idx.push(c * hw * hw + (gy * p + py) * hw + (gx * p + px));
                    }
                }
            }
        }
    }
    idx
}

/// Encode an image into its global CLS embedding and spatial feature map.
pub fn vision_forward(
    tape: &Tape,
    image: &Tensor,
    bound: &DualEncoderParams,
    cfg: &VisionEncoderConfig,
) -> Result<VisionOutput> {
    if image.shape() != [3, cfg.image_size, cfg.image_size] {
        return Err(TensorError::InvalidShape {
            op: "vision_forward",
            shape: image.shape().to_vec(),
            expected: format!("[3, {}, {}]", cfg.image_size, cfg.image_size),
        });
    }
    let d = cfg.embed_dim;
    let n_p = cfg.num_patches();
    let patches = tape.index_select(
        image,
        patch_indices(cfg),
        vec![n_p, 3 * cfg.patch_size * cfg.patch_size],
    )?;
    let tokens = linear(tape, &patches, &bound.patch_w, &bound.patch_b)?;
    let cls = tape.reshape(&bound.vision_cls, vec![1, d])?;
    let x = tape.concat_rows(&[&cls, &tokens])?;
    let mut x = tape.add(&x, &bound.vision_pos)?;
    for block in &bound.vision.blocks {
        x = transformer_block(tape, &x, block, cfg.heads, None)?;
    }
    let x = tape.layer_norm(&x, &bound.vision.lnf_g, &bound.vision.lnf_b, LN_EPS)?;
    let projected = tape.matmul(&x, &bound.vision.proj)?;
    let v_g = tape.reshape(&tape.slice_rows(&projected, 0, 1)?, vec![d])?;
    let patch_rows = tape.slice_rows(&projected, 1, n_p + 1)?;
    let feature_map = tape.reshape(
        &tape.transpose(&patch_rows)?,
        vec![d, cfg.grid(), cfg.grid()],
    )?;
    Ok(VisionOutput { v_g, feature_map })
}

/// Number of leading non-PAD positions; everything after the first PAD is
/// masked out of attention regardless of its id.
fn mask_boundary(tokens: &[u32]) -> usize {
    tokens
        .iter()
        .position(|&t| t == PAD_ID)
        .unwrap_or(tokens.len())
}

fn pad_mask(len: usize, boundary: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for q in 0..len {
        for k in boundary..len {
            data[q * len + k] = ATTN_MASK_NEG;
        }
    }
    Tensor::from_vec(vec![len, len], data).expect("mask shape")
}

/// Encode a token sequence into its CLS embedding `[d]`, un-normalized.
/// Sequences at `max_tokens_base` use the positional table as stored;
/// sequences at `max_tokens_stretched` use its stretched interpolation.
pub fn text_forward(
    tape: &Tape,
    tokens: &[u32],
    bound: &DualEncoderParams,
    cfg: &TextEncoderConfig,
) -> Result<Tensor> {
    let len = tokens.len();
    if len != cfg.max_tokens_base && len != cfg.max_tokens_stretched {
        return Err(TensorError::InvalidArg {
            op: "text_forward",
            msg: format!(
                "token length {len} is neither base {} nor stretched {}",
                cfg.max_tokens_base, cfg.max_tokens_stretched
            ),
        });
    }
    let d = cfg.embed_dim;
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(TensorError::InvalidArg {
            op: "text_forward",
            msg: format!("token id {bad} outside vocab of {}", cfg.vocab_size),
        });
    }
    let emb_idx: Vec<usize> = tokens
        .iter()
        .flat_map(|&t| (0..d).map(move |j| t as usize * d + j))
        .collect();
    let emb = tape.index_select(&bound.tok_emb, emb_idx, vec![len, d])?;
    let pos = if len == cfg.max_tokens_base {
        bound.text_pos.clone()
    } else {
        let s = Tensor::from_vec(
            vec![len, cfg.max_tokens_base],
            stretch_matrix(cfg.max_tokens_base, len, cfg.stretch_keep)?,
        )?;
        tape.matmul(&s, &bound.text_pos)?
    };
    let mut x = tape.add(&emb, &pos)?;
    let mask = pad_mask(len, mask_boundary(tokens));
    for block in &bound.text.blocks {
        x = transformer_block(tape, &x, block, cfg.heads, Some(&mask))?;
    }
    let x = tape.layer_norm(&x, &bound.text.lnf_g, &bound.text.lnf_b, LN_EPS)?;
    let cls = tape.slice_rows(&x, 0, 1)?;
    tape.reshape(&tape.matmul(&cls, &bound.text.proj)?, vec![d])
}

// ── positional stretching ───────────────────────────────────────────────

/// Interpolation matrix `[l1, l0]`: rows `0..keep` copy input rows verbatim,
/// remaining rows are convex combinations of input rows `keep..l0-1` spread
/// linearly.
pub(crate) fn stretch_matrix(l0: usize, l1: usize, keep: usize) -> Result<Vec<f64>> {
    if l1 < l0 {
        return Err(TensorError::InvalidArg {
            op: "stretch_positional",
            msg: format!("target length {l1} below source length {l0}"),
        });
    }
    if keep >= l0 {
        return Err(TensorError::InvalidArg {
            op: "stretch_positional",
            msg: format!("keep {keep} must be below source length {l0}"),
        });
    }
    let mut m = vec![0.0; l1 * l0];
    for (i, row) in m.chunks_mut(l0).enumerate() {
        if i < keep {
            row[i] = 1.0;
            continue;
        }
        let span_out = (l1 - 1 - keep) as f64;
        let t = if span_out == 0.0 {
            keep as f64
        } else {
            keep as f64 + (i - keep) as f64 * (l0 - 1 - keep) as f64 / span_out
        };
        let lo = t.floor() as usize;
        let hi = (lo + 1).min(l0 - 1);
        let frac = t - lo as f64;
        row[lo] += 1.0 - frac;
        row[hi] += frac;
    }
    Ok(m)
}

/// Stretch a positional table `[l0, d]` to `[l1, d]`, keeping the first
/// `keep` rows verbatim and linearly interpolating the rest.
pub fn stretch_positional(pos: &Tensor, l1: usize, keep: usize) -> Result<Tensor> {
    let (l0, d) = match pos.shape() {
        [l0, d] => (*l0, *d),
        sh => {
            return Err(TensorError::InvalidShape {
                op: "stretch_positional",
                shape: sh.to_vec(),
                expected: "rank-2 positional table".into(),
            })
        }
    };
    let m = stretch_matrix(l0, l1, keep)?;
    let mut out = vec![0.0; l1 * d];
    for i in 0..l1 {
        for (j, &coef) in m[i * l0..(i + 1) * l0].iter().enumerate() {
            if coef == 0.0 {
                continue;
            }
            for k in 0..d {
                out[i * d + k] += coef * pos.data()[j * d + k];
            }
        }
    }
    Tensor::from_vec(vec![l1, d], out)
}

#[cfg(test)]
#[path = "encoders_tests.rs"]
mod tests;
