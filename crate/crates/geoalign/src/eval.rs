//! Evaluation protocols: image-text retrieval recall@K, zero-shot region
//! classification, hard-negative ranking, and phrase-conditioned similarity
//! heatmaps.
//!
//! All evaluation is read-only over a loaded model. Ranking ties break by
//! gallery index so results are platform-stable; the toy retrieval protocol
//! pairs each image with exactly one caption.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, Tensor, TensorError};
use crate::data::{write_pgm, DataError, RgbImage, SampleRecord};
use crate::encoders::{
    text_forward, tokenize, vision_forward, DualEncoderParams, TextEncoderConfig, TokenVocab,
    VisionEncoderConfig,
};
use crate::region::{region_embed, roi_align, RegionError, DEFAULT_BINS, DEFAULT_SAMPLES_PER_BIN};
use crate::train::Checkpoint;

#[derive(Debug, Error)]
pub enum EvalError {
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
    #[error("{0}")]
    Config(String),
}

/// A loaded model ready for inference.
pub struct Model {
    pub params: DualEncoderParams,
    pub vision: VisionEncoderConfig,
    pub text: TextEncoderConfig,
    pub vocab: TokenVocab,
}

impl Model {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        Model {
            params: ckpt.params.clone(),
            vision: ckpt.meta.vision.clone(),
            text: ckpt.meta.text.clone(),
            vocab: ckpt.meta.vocab(),
        }
    }

    /// Global embedding and feature map for one image.
    pub fn embed_image(&self, image: &RgbImage) -> Result<(Tensor, Tensor), EvalError> {
        let tape = Tape::new();
        let out = vision_forward(&tape, &image.to_tensor(), &self.params, &self.vision)?;
        Ok((out.v_g.detached(), out.feature_map.detached()))
    }

    /// Text embedding at the base token length.
    pub fn embed_text(&self, text: &str) -> Result<Tensor, EvalError> {
        let tokens = tokenize(text, &self.vocab, self.text.max_tokens_base)?;
        let tape = Tape::new();
        Ok(text_forward(&tape, &tokens, &self.params, &self.text)?.detached())
    }

    /// Text embedding at the stretched token length (detail captions).
    pub fn embed_text_stretched(&self, text: &str) -> Result<Tensor, EvalError> {
        let tokens = tokenize(text, &self.vocab, self.text.max_tokens_stretched)?;
        let tape = Tape::new();
        Ok(text_forward(&tape, &tokens, &self.params, &self.text)?.detached())
    }

    /// ROI-view embedding of one region of a feature map.
    pub fn embed_region(
        &self,
        feature_map: &Tensor,
        bbox: &crate::region::BBox,
    ) -> Result<Tensor, EvalError> {
        let tape = Tape::new();
        let roi = roi_align(&tape, feature_map, bbox, DEFAULT_BINS, DEFAULT_SAMPLES_PER_BIN)?;
        Ok(region_embed(&tape, &roi)?.detached())
    }
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    v.iter().map(|x| x / norm).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    normalize(a)
        .iter()
        .zip(normalize(b))
        .map(|(x, y)| x * y)
        .sum()
}

/// 1-based rank of `true_idx` among `scores`, descending, ties broken by
/// lower index first.
fn rank_of(scores: &[f64], true_idx: usize) -> usize {
    let target = scores[true_idx];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > target || (s == target && j < true_idx))
        .count()
}

// ── retrieval ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "i2t")]
    ImageToText,
    #[serde(rename = "t2i")]
    TextToImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionKind {
    Brief,
    Detail,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub direction: Direction,
    pub recall_at: BTreeMap<usize, f64>,
    pub n_queries: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalPair {
    pub i2t: RetrievalResult,
    pub t2i: RetrievalResult,
    pub caption: CaptionKind,
}

/// One-caption-per-image retrieval in both directions.
pub fn retrieval_eval(
    model: &Model,
    records: &[SampleRecord],
    base_dir: &Path,
    ks: &[usize],
    caption: CaptionKind,
) -> Result<RetrievalPair, EvalError> {
    let n = records.len();
    if n == 0 {
        return Err(EvalError::Config("retrieval needs a nonempty gallery".into()));
    }
    let max_k = ks.iter().copied().max().unwrap_or(0);
    if max_k == 0 || max_k > n {
        return Err(EvalError::Config(format!(
            "recall cutoffs {ks:?} must be within the gallery of {n}"
        )));
    }
    let images: Vec<Vec<f64>> = records
        .par_iter()
        .map(|r| {
            let image = r.load_image(base_dir)?;
            Ok(normalize(model.embed_image(&image)?.0.data()))
        })
        .collect::<Result<_, EvalError>>()?;
    let texts: Vec<Vec<f64>> = records
        .par_iter()
        .map(|r| {
            let t = match caption {
                CaptionKind::Brief => model.embed_text(&r.brief_caption)?,
                CaptionKind::Detail => model.embed_text_stretched(&r.detail_caption)?,
            };
            Ok(normalize(t.data()))
        })
        .collect::<Result<_, EvalError>>()?;

    let score = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let eval_direction = |queries: &[Vec<f64>], gallery: &[Vec<f64>], direction| {
        let mut recall_at: BTreeMap<usize, f64> = ks.iter().map(|&k| (k, 0.0)).collect();
        for (i, q) in queries.iter().enumerate() {
            let scores: Vec<f64> = gallery.iter().map(|g| score(q, g)).collect();
            let rank = rank_of(&scores, i);
            for (&k, hits) in recall_at.iter_mut() {
                if rank <= k {
                    *hits += 1.0;
                }
            }
        }
        for v in recall_at.values_mut() {
            *v /= n as f64;
        }
        RetrievalResult {
            direction,
            recall_at,
            n_queries: n,
        }
    };
    Ok(RetrievalPair {
        i2t: eval_direction(&images, &texts, Direction::ImageToText),
        t2i: eval_direction(&texts, &images, Direction::TextToImage),
        caption,
    })
}

// ── zero-shot region classification ─────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionClsResult {
    pub acc_at_1: f64,
    pub acc_at_5: f64,
    pub n_regions: usize,
    /// Top-1 confusion counts: true category -> predicted category -> count.
    pub confusion: BTreeMap<String, BTreeMap<String, usize>>,
}

/// Ground-truth category of a region, read from the frozen phrase grammar
/// `"{color} {category} in the {location}"`.
pub fn region_category(phrase: &str) -> Option<&str> {
    phrase.split_whitespace().nth(1)
}

/// Classify every annotated box against `"a {class}"` prompt embeddings.
pub fn region_zero_shot(
    model: &Model,
    records: &[SampleRecord],
    base_dir: &Path,
    class_names: &[String],
) -> Result<RegionClsResult, EvalError> {
    if class_names.is_empty() {
        return Err(EvalError::Config("no class names".into()));
    }
    let class_embs: Vec<Vec<f64>> = class_names
        .iter()
        .map(|c| Ok(normalize(model.embed_text(&format!("a {c}"))?.data())))
        .collect::<Result<_, EvalError>>()?;

    let per_record: Vec<Vec<(usize, Vec<f64>)>> = records
        .par_iter()
        .map(|record| {
            let image = record.load_image(base_dir)?;
            let (_, feature_map) = model.embed_image(&image)?;
            record
                .regions
                .iter()
                .map(|region| {
                    let category = region_category(&region.phrase).unwrap_or_default();
                    let true_idx = class_names
                        .iter()
                        .position(|c| c == category)
                        .ok_or_else(|| {
                            EvalError::Config(format!(
                                "record {}: region category {category:?} not in class names",
                                record.id
                            ))
                        })?;
                    let v_r = model.embed_region(&feature_map, &region.bbox)?;
                    Ok((true_idx, normalize(v_r.data())))
                })
                .collect()
        })
        .collect::<Result<_, EvalError>>()?;

    let mut n_regions = 0usize;
    let mut hits1 = 0usize;
    let mut hits5 = 0usize;
    let mut confusion: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for (true_idx, v_r) in per_record.into_iter().flatten() {
        let scores: Vec<f64> = class_embs
            .iter()
            .map(|c| c.iter().zip(&v_r).map(|(x, y)| x * y).sum())
            .collect();
        let rank = rank_of(&scores, true_idx);
        n_regions += 1;
        if rank == 1 {
            hits1 += 1;
        }
        if rank <= 5 {
            hits5 += 1;
        }
        let pred_idx = (0..scores.len())
            .max_by(|&a, &b| {
                scores[a]
                    .partial_cmp(&scores[b])
                    .unwrap()
                    .then(b.cmp(&a))
            })
            .unwrap();
        *confusion
            .entry(class_names[true_idx].clone())
            .or_default()
            .entry(class_names[pred_idx].clone())
            .or_default() += 1;
    }
    if n_regions == 0 {
        return Err(EvalError::Config("no regions to classify".into()));
    }
    Ok(RegionClsResult {
        acc_at_1: hits1 as f64 / n_regions as f64,
        acc_at_5: hits5 as f64 / n_regions as f64,
        n_regions,
        confusion,
    })
}

// ── hard-negative ranking ───────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HardNegResult {
    /// Fraction of regions whose positive phrase strictly outranks every
    /// hard negative; ties count as failures.
    pub success_rate: f64,
    pub n_regions: usize,
}

pub fn hardneg_ranking(
    model: &Model,
    records: &[SampleRecord],
    base_dir: &Path,
) -> Result<HardNegResult, EvalError> {
    let outcomes: Vec<Vec<bool>> = records
        .par_iter()
        .map(|record| {
            let image = record.load_image(base_dir)?;
            let (_, feature_map) = model.embed_image(&image)?;
            record
                .regions
                .iter()
                .map(|region| {
                    if region.hard_negatives.is_empty() {
                        return Err(EvalError::Config(format!(
                            "record {}: region has no hard negatives",
                            record.id
                        )));
                    }
                    let v_r = model.embed_region(&feature_map, &region.bbox)?;
                    let pos = cosine(model.embed_text(&region.phrase)?.data(), v_r.data());
                    for neg in &region.hard_negatives {
                        let s = cosine(model.embed_text(&neg.text)?.data(), v_r.data());
                        if s >= pos {
                            return Ok(false);
                        }
                    }
                    Ok(true)
                })
                .collect()
        })
        .collect::<Result<_, EvalError>>()?;
    let flat: Vec<bool> = outcomes.into_iter().flatten().collect();
    if flat.is_empty() {
        return Err(EvalError::Config("no regions with hard negatives".into()));
    }
    Ok(HardNegResult {
        success_rate: flat.iter().filter(|&&b| b).count() as f64 / flat.len() as f64,
        n_regions: flat.len(),
    })
}

// ── heatmaps ────────────────────────────────────────────────────────────

/// Per-patch cosine grid between feature-map columns and a phrase
/// embedding, min-max normalized to bytes (mid-gray when the range is
/// degenerate).
pub fn heatmap_bytes(feature_map: &Tensor, phrase_emb: &Tensor) -> Vec<u8> {
    let (d, gh, gw) = (
        feature_map.shape()[0],
        feature_map.shape()[1],
        feature_map.shape()[2],
    );
    let phrase = normalize(phrase_emb.data());
    let mut values = Vec::with_capacity(gh * gw);
    for y in 0..gh {
        for x in 0..gw {
            let col: Vec<f64> = (0..d)
                .map(|c| feature_map.data()[c * gh * gw + y * gw + x])
                .collect();
            values.push(normalize(&col).iter().zip(&phrase).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo).is_normal() {
        return vec![128; gh * gw];
    }
    values
        .iter()
        .map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
        .collect()
}

/// Index of the hottest patch, ties to the lower index.
pub fn heatmap_argmax(bytes: &[u8]) -> usize {
    bytes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Write a phrase-conditioned similarity heatmap as a P5 PGM at the input
/// image's resolution (patch values replicated per pixel).
pub fn export_heatmap(
    model: &Model,
    image: &RgbImage,
    phrase: &str,
    out_path: &Path,
) -> Result<(), EvalError> {
    let (_, feature_map) = model.embed_image(image)?;
    let phrase_emb = model.embed_text(phrase)?;
    let grid = heatmap_bytes(&feature_map, &phrase_emb);
    let (gh, gw) = (feature_map.shape()[1], feature_map.shape()[2]);
    let scale = model.vision.patch_size;
    let (out_h, out_w) = (gh * scale, gw * scale);
    let mut pixels = vec![0u8; out_h * out_w];
    for y in 0..out_h {
        for x in 0..out_w {
            pixels[y * out_w + x] = grid[(y / scale) * gw + x / scale];
        }
    }
    write_pgm(out_path, &pixels, out_w, out_h)?;
    Ok(())
}

/// Bundle of whatever tasks an evaluation run produced.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct EvalResults {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RetrievalPair>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub region_cls: Option<RegionClsResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hardneg: Option<HardNegResult>,
}

#[cfg(test)]
#[path = "eval_tests.rs"]
mod tests;
