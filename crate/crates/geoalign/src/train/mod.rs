//! Two-stage training: global contrastive pretraining (Stage I) followed by
//! joint region-phrase, hard-negative, and cross-view consistency
//! fine-tuning (Stage II).
//!
//! A step runs in two passes so memory stays bounded while the contrastive
//! loss still couples the whole batch: sample embeddings are computed first
//! (in parallel, tapes dropped), the loss runs on a small tape over those
//! embeddings as leaves, and each sample is then re-encoded and back-propped
//! with its embedding gradients as seeds. Gradients are summed in sample
//! order, so the result is bitwise independent of the thread count.

mod checkpoint;
mod optim;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use optim::{
    adamw_step, clip_gradients, cosine_warmup_lr, snap_params, OptimizerState, ADAM_BETA1,
    ADAM_BETA2, ADAM_EPS,
};

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, Tensor, TensorError};
use crate::data::{DataError, SampleRecord};
use crate::encoders::{
    text_forward, tokenize, vision_forward, BoundParams, DualEncoderParams, TextEncoderConfig,
    TokenVocab, VisionEncoderConfig, TAU_MAX, TAU_MIN,
};
use crate::losses::{total_loss, BatchEmbeddings, LossBreakdown, LossWeights, Stage};
use crate::region::{region_embed, roi_align, RegionError, DEFAULT_BINS, DEFAULT_SAMPLES_PER_BIN};
use crate::rng::stream_rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: corrupt checkpoint: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("non-finite value: {what}")]
    NonFinite { what: String },
    #[error("{0}")]
    Config(String),
}

/// Which preset fills the stage hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Mirrors the reference schedule (lr 1e-4/1e-6, decay 0.05/1e-3,
    /// warmup 200/50). Needs a corpus large enough to outlast the warmup.
    Paper,
    /// Scaled to the synthetic desk corpus, where both stages train from
    /// scratch in a few dozen steps.
    Toy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_iters: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    /// Keep the standalone global term active in Stage II.
    pub stage2_keep_global: bool,
    pub mask_duplicate_phrases: bool,
    pub seed: u64,
    /// Global gradient-norm bound; values <= 0 disable clipping.
    pub grad_clip_norm: f64,
    /// Checkpoint and exit after this many total epochs while keeping the
    /// learning-rate schedule sized for `epochs`; resuming from the written
    /// checkpoint continues the run bitwise.
    pub stop_after_epochs: Option<usize>,
    pub vision: VisionEncoderConfig,
    /// Text encoder shape; `vocab_size` is replaced by the corpus vocabulary
    /// at Stage I initialization.
    pub text: TextEncoderConfig,
    pub data_path: PathBuf,
    pub init_checkpoint: Option<PathBuf>,
    pub out_checkpoint: PathBuf,
    pub out_metrics: PathBuf,
}

impl TrainConfig {
    pub fn preset(stage: Stage, preset: Preset, seed: u64) -> Self {
        let (epochs, lr, weight_decay, warmup_iters) = match (preset, stage) {
            (Preset::Paper, Stage::StageI) => (1, 1e-4, 0.05, 200),
            (Preset::Paper, Stage::StageII) => (5, 1e-6, 1e-3, 50),
            (Preset::Toy, Stage::StageI) => (1, 2e-3, 0.01, 4),
            (Preset::Toy, Stage::StageII) => (5, 1e-3, 0.01, 8),
        };
        TrainConfig {
            stage,
            epochs,
            batch_size: 32,
            lr,
            weight_decay,
            warmup_iters,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 1.0,
            lambda5: 1.0,
            stage2_keep_global: false,
            mask_duplicate_phrases: true,
            seed,
            grad_clip_norm: 1.0,
            stop_after_epochs: None,
            vision: VisionEncoderConfig::default(),
            text: TextEncoderConfig::with_vocab_size(4),
            data_path: PathBuf::new(),
            init_checkpoint: None,
            out_checkpoint: PathBuf::new(),
            out_metrics: PathBuf::new(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(TrainError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs < 1 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        self.weights().validate()?;
        Ok(())
    }

    /// Stage-gated loss weights.
    pub fn weights(&self) -> LossWeights {
        match self.stage {
            Stage::StageI => LossWeights {
                stage: Stage::StageI,
                lambda1: self.lambda1,
                lambda2: 0.0,
                lambda3: 0.0,
                lambda4: 0.0,
                lambda5: 0.0,
                mask_duplicate_phrases: self.mask_duplicate_phrases,
            },
            Stage::StageII => LossWeights {
                stage: Stage::StageII,
                lambda1: if self.stage2_keep_global {
                    self.lambda1
                } else {
                    0.0
                },
                lambda2: self.lambda2,
                lambda3: self.lambda3,
                lambda4: self.lambda4,
                lambda5: self.lambda5,
                mask_duplicate_phrases: self.mask_duplicate_phrases,
            },
        }
    }
}

/// One metrics-log line, emitted per optimizer step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub global: f64,
    pub rpa: f64,
    pub hna: f64,
    pub vic: f64,
    pub htc: f64,
    pub tau: f64,
    pub grad_norm: f64,
    pub k_regions: usize,
}

// ── per-sample encoding ─────────────────────────────────────────────────

struct RegionForward {
    v_r: Tensor,
    v_crop: Tensor,
    t_r: Tensor,
    negs: Vec<Tensor>,
}

struct SampleForward {
    tape: Tape,
    bound: BoundParams,
    v_g: Tensor,
    t_b: Tensor,
    t_d: Option<Tensor>,
    regions: Vec<RegionForward>,
}

/// What the active loss weights require from each sample.
#[derive(Clone, Copy)]
struct Needs {
    regions: bool,
    crops: bool,
    negatives: bool,
    detail: bool,
}

impl Needs {
    fn from_weights(w: &LossWeights) -> Self {
        Needs {
            regions: w.lambda2 > 0.0 || w.lambda3 > 0.0 || w.lambda4 > 0.0,
            crops: w.lambda4 > 0.0,
            negatives: w.lambda3 > 0.0,
            detail: w.lambda5 > 0.0,
        }
    }
}

fn forward_sample(
    params: &DualEncoderParams,
    vocab: &TokenVocab,
    record: &SampleRecord,
    base_dir: &Path,
    vision_cfg: &VisionEncoderConfig,
    text_cfg: &TextEncoderConfig,
    needs: Needs,
) -> Result<SampleForward, TrainError> {
    let tape = Tape::new();
    let bound = BoundParams::bind(&tape, params);
    let p = &bound.params;
    let image = record.load_image(base_dir)?.to_tensor();
    let vision_out = vision_forward(&tape, &image, p, vision_cfg)?;
    let tokens_b = tokenize(&record.brief_caption, vocab, text_cfg.max_tokens_base)?;
    let t_b = text_forward(&tape, &tokens_b, p, text_cfg)?;
    let t_d = if needs.detail {
        let tokens_d = tokenize(&record.detail_caption, vocab, text_cfg.max_tokens_stretched)?;
        Some(text_forward(&tape, &tokens_d, p, text_cfg)?)
    } else {
        None
    };
    let mut regions = Vec::new();
    if needs.regions {
        for region in &record.regions {
            let roi = roi_align(
                &tape,
                &vision_out.feature_map,
                &region.bbox,
                DEFAULT_BINS,
                DEFAULT_SAMPLES_PER_BIN,
            )?;
            let v_r = region_embed(&tape, &roi)?;
            let v_crop = if needs.crops {
                crate::region::crop_view_embed(&tape, &image, &region.bbox, p, vision_cfg)?
            } else {
                v_r.clone()
            };
            let tokens_r = tokenize(&region.phrase, vocab, text_cfg.max_tokens_base)?;
            let t_r = text_forward(&tape, &tokens_r, p, text_cfg)?;
            let mut negs = Vec::new();
            if needs.negatives {
                for neg in &region.hard_negatives {
                    let tokens_n = tokenize(&neg.text, vocab, text_cfg.max_tokens_base)?;
                    negs.push(text_forward(&tape, &tokens_n, p, text_cfg)?);
                }
            }
            regions.push(RegionForward {
                v_r,
                v_crop,
                t_r,
                negs,
            });
        }
    }
    Ok(SampleForward {
        tape,
        bound,
        v_g: vision_out.v_g,
        t_b,
        t_d,
        regions,
    })
}

// ── batch assembly ──────────────────────────────────────────────────────

/// Plain per-sample embedding values (no tape affiliation).
struct SampleValues {
    v_g: Tensor,
    t_b: Tensor,
    t_d: Option<Tensor>,
    regions: Vec<RegionValues>,
}

struct RegionValues {
    v_r: Tensor,
    v_crop: Tensor,
    t_r: Tensor,
    negs: Vec<Tensor>,
}

impl SampleForward {
    fn values(&self) -> SampleValues {
        SampleValues {
            v_g: self.v_g.detached(),
            t_b: self.t_b.detached(),
            t_d: self.t_d.as_ref().map(Tensor::detached),
            regions: self
                .regions
                .iter()
                .map(|r| RegionValues {
                    v_r: r.v_r.detached(),
                    v_crop: r.v_crop.detached(),
                    t_r: r.t_r.detached(),
                    negs: r.negs.iter().map(Tensor::detached).collect(),
                })
                .collect(),
        }
    }
}

/// Batch embeddings assembled from per-sample encodings, plus the
/// sample-major flattening bookkeeping.
pub struct AssembledBatch {
    pub embeddings: BatchEmbeddings,
    /// Flattened region k -> (sample index, region index within sample).
    pub region_index: Vec<(usize, usize)>,
    pub k_regions: usize,
}

fn stack_rows(tape: &Tape, rows: &[Tensor], d: usize) -> Result<Tensor, TrainError> {
    if rows.is_empty() {
        return Ok(Tensor::zeros(&[0, d]));
    }
    let shaped: Vec<Tensor> = rows
        .iter()
        .map(|r| tape.reshape(r, vec![1, d]))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&Tensor> = shaped.iter().collect();
    Ok(tape.concat_rows(&refs)?)
}

/// Leaf handles on the loss tape, mirroring sample structure, used to route
/// loss gradients back to each sample's own tape.
struct LossLeaves {
    v_g: Tensor,
    t_b: Tensor,
    t_d: Option<Tensor>,
    regions: Vec<RegionLeaves>,
}

struct RegionLeaves {
    v_r: Tensor,
    v_crop: Tensor,
    t_r: Tensor,
    negs: Vec<Tensor>,
}

struct LossBatch {
    embeddings: BatchEmbeddings,
    leaves: Vec<LossLeaves>,
    region_index: Vec<(usize, usize)>,
    /// Leaf handle of log_temperature on the loss tape.
    log_temp_leaf: Tensor,
}

fn build_loss_batch(
    tape: &Tape,
    samples: &[SampleValues],
    log_temperature: &Tensor,
    needs: Needs,
    d: usize,
) -> Result<LossBatch, TrainError> {
    let mut leaves = Vec::with_capacity(samples.len());
    let mut region_index = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let region_leaves: Vec<RegionLeaves> = s
            .regions
            .iter()
            .enumerate()
            .map(|(j, r)| {
                region_index.push((i, j));
                RegionLeaves {
                    v_r: tape.watch(&r.v_r),
                    v_crop: tape.watch(&r.v_crop),
                    t_r: tape.watch(&r.t_r),
                    negs: r.negs.iter().map(|n| tape.watch(n)).collect(),
                }
            })
            .collect();
        leaves.push(LossLeaves {
            v_g: tape.watch(&s.v_g),
            t_b: tape.watch(&s.t_b),
            t_d: s.t_d.as_ref().map(|t| tape.watch(t)),
            regions: region_leaves,
        });
    }

    let v_g = stack_rows(tape, &leaves.iter().map(|l| l.v_g.clone()).collect::<Vec<_>>(), d)?;
    let t_b = stack_rows(tape, &leaves.iter().map(|l| l.t_b.clone()).collect::<Vec<_>>(), d)?;
    let t_d = if needs.detail {
        stack_rows(
            tape,
            &leaves
                .iter()
                .map(|l| l.t_d.clone().expect("detail encoded when needed"))
                .collect::<Vec<_>>(),
            d,
        )?
    } else {
        Tensor::zeros(&[0, d])
    };

    let all_regions: Vec<&RegionLeaves> = leaves.iter().flat_map(|l| l.regions.iter()).collect();
    let k = all_regions.len();
    let v_r = stack_rows(tape, &all_regions.iter().map(|r| r.v_r.clone()).collect::<Vec<_>>(), d)?;
    let v_crop = stack_rows(
        tape,
        &all_regions.iter().map(|r| r.v_crop.clone()).collect::<Vec<_>>(),
        d,
    )?;
    let t_r = stack_rows(tape, &all_regions.iter().map(|r| r.t_r.clone()).collect::<Vec<_>>(), d)?;
    let t_neg = if needs.negatives && k > 0 {
        let q = 1 + all_regions[0].negs.len();
        let mut rows = Vec::with_capacity(k * q);
        for r in &all_regions {
            if 1 + r.negs.len() != q {
                return Err(TrainError::Config(format!(
                    "ragged hard-negative counts in batch: expected {} per region, found {}",
                    q - 1,
                    r.negs.len()
                )));
            }
            rows.push(r.t_r.clone());
            rows.extend(r.negs.iter().cloned());
        }
        let flat = stack_rows(tape, &rows, d)?;
        tape.reshape(&flat, vec![k, q, d])?
    } else {
        Tensor::zeros(&[k, 0, d])
    };

    let log_temp_leaf = tape.watch(log_temperature);
    let tau = tape.clamp(&tape.exp(&log_temp_leaf)?, TAU_MIN, TAU_MAX)?;
    let embeddings = BatchEmbeddings {
        v_g,
        t_b,
        t_d,
        v_r,
        t_r,
        t_neg,
        v_crop,
        tau,
    };
    Ok(LossBatch {
        embeddings,
        leaves,
        region_index,
        log_temp_leaf,
    })
}

/// Assemble plain (value-only) batch embeddings for inspection and tests.
/// Flattening is sample-major with region order preserved.
pub fn assemble_batch(
    records: &[&SampleRecord],
    params: &DualEncoderParams,
    vocab: &TokenVocab,
    base_dir: &Path,
    weights: &LossWeights,
    vision_cfg: &VisionEncoderConfig,
    text_cfg: &TextEncoderConfig,
) -> Result<AssembledBatch, TrainError> {
    if records.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    let needs = Needs::from_weights(weights);
    let values = encode_samples(params, vocab, records, base_dir, vision_cfg, text_cfg, needs)?;
    let tape = Tape::new();
    let batch =
        build_loss_batch(&tape, &values, &params.log_temperature, needs, vision_cfg.embed_dim)?;
    let e = &batch.embeddings;
    let k_regions = batch.region_index.len();
    Ok(AssembledBatch {
        embeddings: BatchEmbeddings {
            v_g: e.v_g.detached(),
            t_b: e.t_b.detached(),
            t_d: e.t_d.detached(),
            v_r: e.v_r.detached(),
            t_r: e.t_r.detached(),
            t_neg: e.t_neg.detached(),
            v_crop: e.v_crop.detached(),
            tau: e.tau.detached(),
        },
        region_index: batch.region_index,
        k_regions,
    })
}

/// Pass 1: encode samples in parallel, keep only the embedding values.
fn encode_samples(
    params: &DualEncoderParams,
    vocab: &TokenVocab,
    records: &[&SampleRecord],
    base_dir: &Path,
    vision_cfg: &VisionEncoderConfig,
    text_cfg: &TextEncoderConfig,
    needs: Needs,
) -> Result<Vec<SampleValues>, TrainError> {
    records
        .par_iter()
        .map(|record| {
            forward_sample(params, vocab, record, base_dir, vision_cfg, text_cfg, needs)
                .map(|f| f.values())
        })
        .collect()
}

// ── the optimizer step ──────────────────────────────────────────────────

pub struct StepOutput {
    pub breakdown: LossBreakdown,
    pub grad_norm: f64,
    pub k_regions: usize,
    pub tau: f64,
}

fn seed_pairs<'a>(
    leaves: &LossLeaves,
    grads: &'a crate::autograd::Gradients,
    forward: &'a SampleForward,
) -> Vec<(&'a Tensor, Tensor)> {
    let mut pairs: Vec<(&Tensor, Tensor)> = Vec::new();
    let mut push = |target: &'a Tensor, leaf: &Tensor| {
        if let Some(g) = grads.wrt(leaf) {
            pairs.push((target, g.detached()));
        }
    };
    push(&forward.v_g, &leaves.v_g);
    push(&forward.t_b, &leaves.t_b);
    if let (Some(td_f), Some(td_l)) = (&forward.t_d, &leaves.t_d) {
        push(td_f, td_l);
    }
    for (rf, rl) in forward.regions.iter().zip(&leaves.regions) {
        push(&rf.v_r, &rl.v_r);
        push(&rf.v_crop, &rl.v_crop);
        push(&rf.t_r, &rl.t_r);
        for (nf, nl) in rf.negs.iter().zip(&rl.negs) {
            push(nf, nl);
        }
    }
    pairs
}

/// Forward, loss, backward, clip, and AdamW for one batch.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut DualEncoderParams,
    opt: &mut OptimizerState,
    vocab: &TokenVocab,
    records: &[&SampleRecord],
    base_dir: &Path,
    cfg: &TrainConfig,
    weights: &LossWeights,
    lr: f64,
) -> Result<StepOutput, TrainError> {
    let needs = Needs::from_weights(weights);
    let (vision_cfg, text_cfg) = (&cfg.vision, &cfg.text);
    let d = vision_cfg.embed_dim;

    // Pass 1: embedding values.
    let values = encode_samples(params, vocab, records, base_dir, vision_cfg, text_cfg, needs)?;

    // Loss over embedding leaves.
    let loss_tape = Tape::new();
    let batch = build_loss_batch(&loss_tape, &values, &params.log_temperature, needs, d)?;
    let tau = batch.embeddings.tau.item();
    let (loss, breakdown) = total_loss(&loss_tape, &batch.embeddings, weights)?;
    if !breakdown.total.is_finite() {
        return Err(TrainError::NonFinite {
            what: format!("loss {breakdown:?}"),
        });
    }
    let loss_grads = loss_tape.backward(&loss)?;

    // Pass 2: re-encode and back-propagate each sample with its seeds.
    let per_sample: Result<Vec<BTreeMap<String, Tensor>>, TrainError> = records
        .par_iter()
        .zip(batch.leaves.par_iter())
        .map(|(record, sample_leaves)| {
            let forward =
                forward_sample(params, vocab, record, base_dir, vision_cfg, text_cfg, needs)?;
            let pairs = seed_pairs(sample_leaves, &loss_grads, &forward);
            let seeds: Vec<(&Tensor, &Tensor)> = pairs.iter().map(|(t, g)| (*t, g)).collect();
            let mut named = BTreeMap::new();
            if !seeds.is_empty() {
                let grads = forward.tape.backward_seeded(&seeds)?;
                for (name, tensor) in forward.bound.named() {
                    if let Some(g) = grads.wrt(tensor) {
                        named.insert(name, g.detached());
                    }
                }
            }
            Ok(named)
        })
        .collect();

    // Deterministic summation in sample order.
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    for sample_grads in per_sample? {
        for (name, g) in sample_grads {
            match grads.get_mut(&name) {
                Some(acc) => {
                    let sum: Vec<f64> =
                        acc.data().iter().zip(g.data()).map(|(a, b)| a + b).collect();
                    *acc = Tensor::from_vec(acc.shape().to_vec(), sum)?;
                }
                None => {
                    grads.insert(name, g);
                }
            }
        }
    }
    // The temperature gradient lives on the loss tape only.
    if let Some(g) = loss_grads.wrt(&batch.log_temp_leaf) {
        match grads.get_mut("log_temperature") {
            Some(acc) => {
                let sum = acc.item() + g.item();
                *acc = Tensor::scalar(sum);
            }
            None => {
                grads.insert("log_temperature".into(), g.detached());
            }
        }
    }

    let grad_norm = clip_gradients(&mut grads, cfg.grad_clip_norm);
    adamw_step(params, &grads, opt, lr, cfg.weight_decay)?;
    Ok(StepOutput {
        breakdown,
        grad_norm,
        k_regions: batch.region_index.len(),
        tau,
    })
}

// ── the stage runner ────────────────────────────────────────────────────

fn vocab_corpus(records: &[SampleRecord]) -> Vec<&str> {
    let mut texts = Vec::new();
    for r in records {
        texts.push(r.brief_caption.as_str());
        texts.push(r.detail_caption.as_str());
        for region in &r.regions {
            texts.push(region.phrase.as_str());
            for neg in &region.hard_negatives {
                texts.push(neg.text.as_str());
            }
        }
    }
    texts
}

fn validate_stage_data(
    cfg: &TrainConfig,
    weights: &LossWeights,
    records: &[SampleRecord],
) -> Result<(), TrainError> {
    if records.is_empty() {
        return Err(TrainError::Config("no training records".into()));
    }
    if weights.lambda3 > 0.0 {
        let mut q: Option<usize> = None;
        for r in records {
            for (i, region) in r.regions.iter().enumerate() {
                let n = region.hard_negatives.len();
                if n == 0 {
                    return Err(TrainError::Config(format!(
                        "record {}: region {i} has no hard negatives; run the hardneg step first",
                        r.id
                    )));
                }
                match q {
                    None => q = Some(n),
                    Some(expected) if expected != n => {
                        return Err(TrainError::Config(format!(
                            "record {}: region {i} has {n} negatives, others have {expected}",
                            r.id
                        )))
                    }
                    _ => {}
                }
            }
        }
    }
    let _ = cfg;
    Ok(())
}

/// Run one training stage over `records` (already restricted to the train
/// split). Images resolve relative to `base_dir`. Writes the metrics JSONL
/// and the final checkpoint to the paths in `cfg`, and also returns them.
pub fn run_stage(
    cfg: &TrainConfig,
    records: &[SampleRecord],
    base_dir: &Path,
) -> Result<(Checkpoint, Vec<StepMetrics>), TrainError> {
    cfg.validate()?;
    let weights = cfg.weights();

    // Parameters and vocabulary: fresh for Stage I, from the initial
    // checkpoint for Stage II (or to resume the same stage).
    let init = match &cfg.init_checkpoint {
        Some(path) => Some(Checkpoint::load(path)?),
        None => None,
    };
    if cfg.stage == Stage::StageII && init.is_none() {
        return Err(TrainError::Config(
            "stage2 requires an initial checkpoint from stage1 (--init)".into(),
        ));
    }
    validate_stage_data(cfg, &weights, records)?;
    let (mut params, vocab, vision_cfg, text_cfg, mut opt, start_epoch, mut steps_done) =
        match init {
            Some(ckpt) => {
                let vocab = ckpt.meta.vocab();
                let resume_same_stage = ckpt.meta.stage == cfg.stage;
                let (opt, epoch, steps) = if resume_same_stage {
                    (
                        ckpt.optimizer
                            .unwrap_or_else(|| OptimizerState::new(&ckpt.params)),
                        ckpt.meta.epochs_done,
                        ckpt.meta.steps_done,
                    )
                } else {
                    (OptimizerState::new(&ckpt.params), 0, 0)
                };
                (
                    ckpt.params,
                    vocab,
                    ckpt.meta.vision,
                    ckpt.meta.text,
                    opt,
                    epoch,
                    steps,
                )
            }
            None => {
                let vocab = TokenVocab::build(vocab_corpus(records));
                let mut text_cfg = cfg.text.clone();
                text_cfg.vocab_size = vocab.size();
                let mut params = DualEncoderParams::init(&cfg.vision, &text_cfg, cfg.seed)?;
                snap_params(&mut params);
                let opt = OptimizerState::new(&params);
                (params, vocab, cfg.vision.clone(), text_cfg, opt, 0, 0)
            }
        };
    let stop_epoch = cfg.stop_after_epochs.unwrap_or(cfg.epochs).min(cfg.epochs);
    if start_epoch >= stop_epoch {
        return Err(TrainError::Config(format!(
            "checkpoint already covers {start_epoch} epochs, nothing to do before epoch {stop_epoch}"
        )));
    }

    let steps_per_epoch = records.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    if cfg.warmup_iters >= total_steps {
        return Err(TrainError::Config(format!(
            "warmup_iters {} must be below the {total_steps} total steps \
             ({} records, batch {}, {} epochs); enlarge the corpus or use the toy preset",
            cfg.warmup_iters,
            records.len(),
            cfg.batch_size,
            cfg.epochs
        )));
    }

    let mut run_cfg = cfg.clone();
    run_cfg.vision = vision_cfg.clone();
    run_cfg.text = text_cfg.clone();

    let metrics_file = std::fs::File::create(&cfg.out_metrics).map_err(|source| TrainError::Io {
        path: cfg.out_metrics.clone(),
        source,
    })?;
    let mut metrics_out = std::io::BufWriter::new(metrics_file);
    let mut metrics = Vec::with_capacity(total_steps);

    let make_meta = |epochs_done: usize, steps_done: usize, vocab: &TokenVocab| CheckpointMeta {
        vision: vision_cfg.clone(),
        text: text_cfg.clone(),
        vocab_words: vocab.words().to_vec(),
        stage: cfg.stage,
        seed: cfg.seed,
        epochs_done,
        steps_done,
    };

    for epoch in start_epoch..stop_epoch {
        let mut order: Vec<usize> = (0..records.len()).collect();
        {
            use rand::seq::SliceRandom;
            let mut rng = stream_rng(cfg.seed, &format!("shuffle.{}", cfg.stage), epoch as u64);
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SampleRecord> = chunk.iter().map(|&i| &records[i]).collect();
            let lr = cosine_warmup_lr(steps_done, total_steps, cfg.warmup_iters, cfg.lr);
            let out = match train_step(
                &mut params,
                &mut opt,
                &vocab,
                &batch,
                base_dir,
                &run_cfg,
                &weights,
                lr,
            ) {
                Ok(out) => out,
                Err(e) => {
                    // Keep the last good state on disk before aborting.
                    let ckpt = Checkpoint {
                        meta: make_meta(epoch, steps_done, &vocab),
                        params,
                        optimizer: Some(opt),
                    };
                    ckpt.save(&cfg.out_checkpoint)?;
                    return Err(e);
                }
            };
            steps_done += 1;
            let line = StepMetrics {
                step: steps_done,
                epoch: epoch + 1,
                lr,
                total: out.breakdown.total,
                global: out.breakdown.global,
                rpa: out.breakdown.rpa,
                hna: out.breakdown.hna,
                vic: out.breakdown.vic,
                htc: out.breakdown.htc,
                tau: out.tau,
                grad_norm: out.grad_norm,
                k_regions: out.k_regions,
            };
            serde_json::to_writer(&mut metrics_out, &line).map_err(|e| TrainError::Io {
                path: cfg.out_metrics.clone(),
                source: std::io::Error::other(e),
            })?;
            metrics_out.write_all(b"\n").map_err(|source| TrainError::Io {
                path: cfg.out_metrics.clone(),
                source,
            })?;
            metrics.push(line);
        }
    }
    metrics_out.flush().map_err(|source| TrainError::Io {
        path: cfg.out_metrics.clone(),
        source,
    })?;

    let checkpoint = Checkpoint {
        meta: make_meta(stop_epoch, steps_done, &vocab),
        params,
        optimizer: Some(opt),
    };
    checkpoint.save(&cfg.out_checkpoint)?;
    Ok((checkpoint, metrics))
}

#[cfg(test)]
#[path = "train_tests.rs"]
mod tests;
